"""Command-line interface: train, score, eval, synth and pipeline.

Every command prints a machine-readable summary (JSON, or CSV rows for
``score``) to stdout and logs progress to stderr. Exit codes: 0 on
success, 2 for configuration or input problems, 3 for numerical
failures, 4 for evaluation-domain errors (such as label sets with no
positives).

Flags beat config-file entries, which beat built-in defaults. The
config file is JSON whose keys mirror the long flag names with
underscores (for example ``{"max_iters": 10, "mode": "orthogonal"}``).
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import model as model_mod
from .errors import (
    ConfigError,
    EvaluationError,
    InputError,
    NumericalError,
    ParameterError,
    SsgpfaError,
)
from .metrics import EvalReport, best_f1_sweep, range_adjusted_metrics, sweep_curve

__all__ = ["main", "build_parser"]

log = logging.getLogger("ssgpfa")

_DEFAULTS = {
    "kernels": None,
    "latents": None,
    "mode": "orthogonal",
    "rho": None,
    "log_rho": None,
    "robust": None,
    "robust_scope": "joint",
    "max_iters": 50,
    "tol": 1e-6,
    "seed": 0,
    "threshold": None,
    "sweep": False,
    "dataset_layout": "csv",
    "scenario": None,
    "length": 300,
    "dims": 8,
    "labels": None,
    "curve": None,
    "input": None,
    "model": None,
    "output": None,
    "config": None,
    "train_fraction": 0.2,
}

_DEFAULT_RHO = 1e-12


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ssgpfa",
        description="Linear-time online anomaly detection with latent GP factors.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *, rho: bool = False) -> None:
        p.add_argument("--config", help="JSON config file; flags override its entries")
        p.add_argument("--seed", type=int, help="RNG seed (default 0)")
        if rho:
            group = p.add_mutually_exclusive_group()
            group.add_argument("--rho", type=float,
                               help="robust acceptance threshold (default 1e-12)")
            group.add_argument("--log-rho", dest="log_rho", type=float,
                               help="log-space robust threshold; overrides --rho")
            p.add_argument("--robust", type=_parse_bool, metavar="{true,false}",
                           help="toggle the robust gate")

    p_train = sub.add_parser("train", help="fit a model from a training CSV")
    p_train.add_argument("--input", help="training CSV")
    p_train.add_argument("--model", help="where to write the model JSON")
    p_train.add_argument("--kernels", help="semicolon-separated kernel expressions")
    p_train.add_argument("--latents", type=int, help="number of latent processes")
    p_train.add_argument("--mode", choices=["orthogonal", "unconstrained"])
    p_train.add_argument("--max-iters", dest="max_iters", type=int, help="EM iteration cap")
    p_train.add_argument("--tol", type=float, help="relative log-likelihood tolerance")
    common(p_train, rho=True)
    p_train.set_defaults(func=cmd_train)

    p_score = sub.add_parser("score", help="stream anomaly scores for a CSV")
    p_score.add_argument("--input", help="CSV to score")
    p_score.add_argument("--model", help="model JSON from train")
    p_score.add_argument("--output", help="score CSV path (default: stdout)")
    p_score.add_argument("--robust-scope", dest="robust_scope",
                         choices=["joint", "per_dim"],
                         help="gate whole points (joint) or single dimensions")
    common(p_score, rho=True)
    p_score.set_defaults(func=cmd_score)

    p_eval = sub.add_parser("eval", help="range-adjusted metrics for a score CSV")
    p_eval.add_argument("--input", help="score CSV from the score command")
    p_eval.add_argument("--labels", help="CSV whose is_anomaly column supplies labels")
    group = p_eval.add_mutually_exclusive_group()
    group.add_argument("--threshold", type=float, help="fixed decision threshold")
    group.add_argument("--sweep", action="store_true", default=None,
                       help="search the best-F1 threshold (default)")
    p_eval.add_argument("--curve", help="also write the full threshold curve CSV here")
    common(p_eval)
    p_eval.set_defaults(func=cmd_eval)

    p_synth = sub.add_parser("synth", help="generate a labeled synthetic dataset")
    p_synth.add_argument("--scenario", choices=sorted(data_mod.SCENARIOS),
                         help="which dataset to generate")
    p_synth.add_argument("--length", type=int, help="series length")
    p_synth.add_argument("--dims", type=int, help="observed dimensions (explain scenario)")
    p_synth.add_argument("--output", help="CSV path for the series")
    common(p_synth)
    p_synth.set_defaults(func=cmd_synth)

    p_pipe = sub.add_parser(
        "pipeline", help="synth/load, train, score and evaluate in one run")
    p_pipe.add_argument("--scenario", choices=sorted(data_mod.SCENARIOS),
                        help="synthetic scenario to run end to end")
    p_pipe.add_argument("--input", help="dataset root or CSV (alternative to --scenario)")
    p_pipe.add_argument("--dataset-layout", dest="dataset_layout",
                        choices=["csv", "nab", "nasa", "smd"],
                        help="directory layout under --input")
    p_pipe.add_argument("--output", help="directory for models and score files")
    p_pipe.add_argument("--kernels", help="semicolon-separated kernel expressions")
    p_pipe.add_argument("--latents", type=int, help="number of latent processes")
    p_pipe.add_argument("--mode", choices=["orthogonal", "unconstrained"])
    p_pipe.add_argument("--max-iters", dest="max_iters", type=int)
    p_pipe.add_argument("--tol", type=float)
    p_pipe.add_argument("--length", type=int, help="series length for --scenario")
    p_pipe.add_argument("--dims", type=int, help="dimensions for --scenario explain")
    p_pipe.add_argument("--threshold", type=float,
                        help="fixed threshold instead of the best-F1 sweep")
    common(p_pipe, rho=True)
    p_pipe.set_defaults(func=cmd_pipeline)

    return parser


def _merge_config(args: argparse.Namespace) -> dict:
    """Defaults, then config-file entries, then explicit flags."""
    cfg = dict(_DEFAULTS)
    path = getattr(args, "config", None)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as exc:
            raise InputError(f"cannot read config file {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(_DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if loaded.get("rho") is not None and loaded.get("log_rho") is not None:
            raise ConfigError("config sets both rho and log_rho; pick one")
        if loaded.get("threshold") is not None and loaded.get("sweep"):
            raise ConfigError("config sets both threshold and sweep; pick one")
        cfg.update(loaded)
    for key in _DEFAULTS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _kernel_list(cfg: dict):
    if cfg["kernels"] is None:
        if cfg["latents"] is not None:
            return model_mod.default_multivariate_kernels(cfg["latents"])
        return None
    if isinstance(cfg["kernels"], str):
        exprs = [part.strip() for part in cfg["kernels"].split(";") if part.strip()]
    else:
        exprs = list(cfg["kernels"])
    if not exprs:
        raise ConfigError("no kernel expressions given")
    if cfg["latents"] is not None and cfg["latents"] != len(exprs):
        raise ConfigError(
            f"--latents {cfg['latents']} does not match {len(exprs)} kernel expressions"
        )
    return exprs


def _require(cfg: dict, key: str, flag: str):
    if cfg[key] in (None, ""):
        raise ConfigError(f"missing required option {flag}")
    return cfg[key]


def _json_ready(value):
    if isinstance(value, dict):
        return {k: _json_ready(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_ready(v) for v in value]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, np.integer):
        return int(value)
    return value


def _emit(payload: dict) -> None:
    json.dump(_json_ready(payload), sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


def _report_dict(report: EvalReport) -> dict:
    return {
        "threshold": report.threshold,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "true_positives": report.true_positives,
        "false_positives": report.false_positives,
        "false_negatives": report.false_negatives,
    }


def _train_model(series, cfg: dict):
    robust = cfg["robust"] if cfg["robust"] is not None else False
    robust_rho = None
    if robust:
        robust_rho = cfg["rho"] if cfg["rho"] is not None else _DEFAULT_RHO
        if cfg["log_rho"] is not None:
            robust_rho = math.exp(cfg["log_rho"])
    return model_mod.train_series(
        series,
        kernels=_kernel_list(cfg),
        mode=cfg["mode"],
        max_iters=cfg["max_iters"],
        tol=cfg["tol"],
        robust_rho=robust_rho,
    )


def cmd_train(cfg: dict) -> int:
    input_path = _require(cfg, "input", "--input")
    model_path = _require(cfg, "model", "--model")
    series = data_mod.load_csv(input_path)
    log.info("training on %s: %d dims, %d points", input_path, series.n_dims, series.length)
    model = _train_model(series, cfg)
    model_mod.save_model(model, model_path)
    final_ll = model.training_log[-1] if model.training_log else None
    log.info("saved model to %s", model_path)
    _emit({
        "model": str(model_path),
        "mode": model.mode,
        "n_dims": model.n_dims,
        "n_latents": model.n_latents,
        "iterations": len(model.training_log),
        "final_log_likelihood": final_ll,
    })
    return 0


def _scoring_kwargs(cfg: dict) -> dict:
    return {
        "rho": _DEFAULT_RHO if cfg["rho"] is None else cfg["rho"],
        "log_rho": cfg["log_rho"],
        "robust": cfg["robust"] if cfg["robust"] is not None else True,
        "robust_scope": cfg["robust_scope"],
    }


def _render_float(x: float) -> str:
    return repr(float(x))


def cmd_score(cfg: dict) -> int:
    input_path = _require(cfg, "input", "--input")
    model_path = _require(cfg, "model", "--model")
    model = model_mod.load_model(model_path)
    rows = ((t, y, m) for t, y, m, _ in data_mod.iter_csv_rows(input_path))
    points = model_mod.score_online(model, rows, **_scoring_kwargs(cfg))
    out = sys.stdout if cfg["output"] in (None, "-") else \
        open(cfg["output"], "w", encoding="utf-8", newline="")
    close = out is not sys.stdout
    D, K = model.n_dims, model.n_latents
    header = (["timestamp", "score"]
              + [f"marginal_nll_{i}" for i in range(D)]
              + ["accepted"]
              + [f"latent_nll_{k}" for k in range(K)]
              + ["reconstruction_error"])
    n = 0
    try:
        out.write(",".join(header) + "\n")
        for point in points:
            fields = [data_mod._render_number(point.timestamp),
                      _render_float(point.score)]
            fields += [_render_float(x) for x in point.marginal_nlls]
            fields.append("1" if point.accepted else "0")
            fields += [_render_float(x) for x in point.latent_nlls]
            fields.append(_render_float(point.reconstruction_error))
            out.write(",".join(fields) + "\n")
            n += 1
    finally:
        if close:
            out.close()
    log.info("scored %d points from %s", n, input_path)
    return 0


def _read_score_column(path) -> np.ndarray:
    scores = []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split(",")
        try:
            col = header.index("score")
        except ValueError:
            raise InputError(f"{path}: no 'score' column in header") from None
        for line_no, line in enumerate(fh, start=2):
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split(",")
            if col >= len(fields):
                raise InputError(f"{path}: line {line_no}: missing score field")
            try:
                scores.append(float(fields[col]))
            except ValueError:
                raise InputError(
                    f"{path}: line {line_no}: bad score {fields[col]!r}"
                ) from None
    if not scores:
        raise InputError(f"{path}: no score rows")
    return np.array(scores)


def _read_labels(path) -> np.ndarray:
    series = data_mod.load_csv(path)
    if series.labels is None:
        raise InputError(f"{path}: no is_anomaly column to evaluate against")
    return series.labels


def _write_curve(path, reports) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("threshold,precision,recall,f1,true_positives,false_positives,"
                 "false_negatives\n")
        for r in reports:
            fh.write(",".join([
                _render_float(r.threshold),
                _render_float(r.precision),
                _render_float(r.recall),
                _render_float(r.f1),
                str(r.true_positives),
                str(r.false_positives),
                str(r.false_negatives),
            ]) + "\n")


def cmd_eval(cfg: dict) -> int:
    input_path = _require(cfg, "input", "--input")
    labels_path = _require(cfg, "labels", "--labels")
    scores = _read_score_column(input_path)
    labels = _read_labels(labels_path)
    if labels.shape != scores.shape:
        raise InputError(
            f"scores ({scores.size}) and labels ({labels.size}) differ in length"
        )
    if cfg["threshold"] is not None:
        report = range_adjusted_metrics(scores, labels, cfg["threshold"])
    else:
        report = best_f1_sweep(scores, labels)
    if cfg["curve"]:
        _write_curve(cfg["curve"], sweep_curve(scores, labels))
        log.info("wrote threshold curve to %s", cfg["curve"])
    _emit({"report": _report_dict(report), "n_points": int(scores.size)})
    return 0


def _generate(cfg: dict):
    scenario = _require(cfg, "scenario", "--scenario")
    fn = data_mod.SCENARIOS[scenario]
    if scenario == "explain":
        series, _, _ = fn(seed=cfg["seed"], length=cfg["length"], n_dims=cfg["dims"])
    else:
        series = fn(seed=cfg["seed"], length=cfg["length"])
    return scenario, series


def _anomaly_windows(labels) -> list:
    if labels is None or not labels.any():
        return []
    padded = np.diff(np.concatenate(([0], labels.astype(np.int8), [0])))
    starts = np.nonzero(padded == 1)[0]
    stops = np.nonzero(padded == -1)[0]
    return [[int(a), int(b)] for a, b in zip(starts, stops)]


def cmd_synth(cfg: dict) -> int:
    output = _require(cfg, "output", "--output")
    scenario, series = _generate(cfg)
    data_mod.write_csv(series, output)
    _emit({
        "output": str(output),
        "scenario": scenario,
        "length": series.length,
        "n_dims": series.n_dims,
        "anomaly_windows": _anomaly_windows(series.labels),
    })
    return 0


def _pipeline_case(name, train, test, cfg, out_dir):
    model = _train_model(train, cfg)
    points = list(model_mod.score_online(model, test, **_scoring_kwargs(cfg)))
    scores = np.array([p.score for p in points])
    if test.labels is None:
        raise EvaluationError(f"case {name!r} has no labels to evaluate against")
    if cfg["threshold"] is not None:
        report = range_adjusted_metrics(scores, test.labels, cfg["threshold"])
    else:
        report = best_f1_sweep(scores, test.labels)
    if out_dir is not None:
        model_mod.save_model(model, out_dir / f"{name}_model.json")
        scored = data_mod.LabeledSeries(test.timestamps, scores[None, :])
        data_mod.write_csv(scored, out_dir / f"{name}_scores.csv")
    return {
        "name": name,
        "n_train": train.length,
        "n_test": test.length,
        "report": _report_dict(report),
    }


def cmd_pipeline(cfg: dict) -> int:
    if cfg["scenario"] is not None and cfg["input"] is not None:
        raise ConfigError("pass either --scenario or --input, not both")
    out_dir = None
    if cfg["output"]:
        out_dir = Path(cfg["output"])
        out_dir.mkdir(parents=True, exist_ok=True)

    if cfg["input"] is not None:
        cases = data_mod.load_benchmark_layout(cfg["input"], cfg["dataset_layout"])
        results = []
        for case in cases:
            log.info("pipeline case %s: train %d, test %d points",
                     case.name, case.train.length, case.test.length)
            results.append(_pipeline_case(case.name, case.train, case.test, cfg, out_dir))
        mean_f1 = float(np.mean([r["report"]["f1"] for r in results]))
        _emit({
            "dataset_layout": cfg["dataset_layout"],
            "cases": results,
            "mean_f1": mean_f1,
        })
        return 0

    scenario, series = _generate(cfg)
    train, test = data_mod.split_train_test(series, cfg["train_fraction"])
    result = _pipeline_case(scenario, train, test, cfg, out_dir)
    _emit({"scenario": scenario, **result})
    return 0


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _merge_config(args)
        return args.func(cfg)
    except EvaluationError as exc:
        log.error("%s", exc)
        return 4
    except NumericalError as exc:
        log.error("%s", exc)
        return 3
    except (ConfigError, InputError, ParameterError) as exc:
        log.error("%s", exc)
        return 2
    except SsgpfaError as exc:
        log.error("%s", exc)
        return 2
    except OSError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
