"""Standardization and range-adjusted anomaly-detection metrics.

Scoring quality is judged with the point-adjust protocol common in
time-series anomaly benchmarks: a contiguous run of anomalous labels
counts as fully detected as soon as any single point inside it is
flagged, after which precision/recall/F1 are computed pointwise on the
adjusted flags. A detector is flagged at threshold t wherever
score > t (strictly). NaN scores never flag.

The threshold sweep evaluates every distinct score value plus the two
infinities, so the reported best F1 is exact, not grid-approximated.
The sweep maintains running counts as points cross the moving
threshold, so a full curve costs O(T log T) rather than O(T^2).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import EvaluationError, InputError

__all__ = [
    "EvalReport",
    "standardize",
    "range_adjusted_metrics",
    "best_f1_sweep",
    "sweep_curve",
]


def standardize(train: np.ndarray, test: np.ndarray | None = None):
    """Standardize with statistics estimated from the training data only.

    Means and standard deviations (population, ddof=0) are computed per
    dimension over the finite entries of ``train``; the same affine
    transform is applied to ``test`` when given. A dimension with zero
    variance keeps its values centered but unscaled (std clamped to 1,
    with a warning); a dimension with no finite training entries is an
    error.

    Returns ``(scaled_train, mean, std)`` or, with a test array,
    ``(scaled_train, scaled_test, mean, std)``. Shapes are preserved and
    NaN entries stay NaN.
    """
    train = np.asarray(train, dtype=float)
    squeeze = train.ndim == 1
    mat = np.atleast_2d(train)
    if mat.ndim != 2:
        raise InputError(f"values must be 1- or 2-dimensional, got shape {train.shape}")
    finite_counts = np.isfinite(mat).sum(axis=1)
    empty = np.nonzero(finite_counts == 0)[0]
    if empty.size:
        raise InputError(f"dimension {empty[0]} has no finite values to standardize")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        mean = np.nanmean(mat, axis=1)
        std = np.nanstd(mat, axis=1)
    flat = std == 0.0
    if flat.any():
        warnings.warn(
            f"dimension {np.nonzero(flat)[0][0]} has zero variance; leaving its scale unchanged",
            stacklevel=2,
        )
        std = np.where(flat, 1.0, std)
    scaled = (mat - mean[:, None]) / std[:, None]
    scaled = scaled[0] if squeeze else scaled
    if test is None:
        return scaled, mean, std
    test = np.asarray(test, dtype=float)
    test_squeeze = test.ndim == 1
    test_mat = np.atleast_2d(test)
    if test_mat.shape[0] != mat.shape[0]:
        raise InputError(
            f"test has {test_mat.shape[0]} dimensions, train has {mat.shape[0]}"
        )
    scaled_test = (test_mat - mean[:, None]) / std[:, None]
    return scaled, (scaled_test[0] if test_squeeze else scaled_test), mean, std


@dataclass(frozen=True)
class EvalReport:
    """Detection quality at one threshold.

    Counts are pointwise after range adjustment. ``threshold`` is set
    when the report came out of a sweep.
    """

    precision: float
    recall: float
    f1: float
    true_positives: int
    false_positives: int
    false_negatives: int
    threshold: float | None = None


def _validate_scores_labels(scores, labels):
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels)
    if labels.shape != scores.shape:
        raise InputError(
            f"scores and labels must have equal length, got {scores.shape} and {labels.shape}"
        )
    uniq = np.unique(labels)
    if not np.all(np.isin(uniq, (0, 1, False, True))):
        raise InputError(f"labels must be binary, found values {uniq[:5]!r}")
    labels = labels.astype(bool)
    if not labels.any():
        raise EvaluationError("labels contain no anomalous points; recall is undefined")
    return scores, labels


def _label_runs(labels: np.ndarray):
    """Contiguous runs of True as (start, stop) half-open pairs."""
    padded = np.diff(np.concatenate(([0], labels.view(np.int8), [0])))
    starts = np.nonzero(padded == 1)[0]
    stops = np.nonzero(padded == -1)[0]
    return list(zip(starts, stops))


def _adjust(preds: np.ndarray, labels: np.ndarray) -> np.ndarray:
    adjusted = preds.copy()
    for start, stop in _label_runs(labels):
        if adjusted[start:stop].any():
            adjusted[start:stop] = True
    return adjusted


def _report(tp: int, fp: int, fn: int, threshold: float | None = None) -> EvalReport:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2.0 * precision * recall / (precision + recall) if precision + recall else 0.0
    return EvalReport(precision, recall, f1, int(tp), int(fp), int(fn), threshold)


def range_adjusted_metrics(scores, labels, threshold: float, *,
                           adjust: bool = True) -> EvalReport:
    """Precision/recall/F1 at a fixed threshold.

    Flags strictly above-threshold scores, expands flags to whole label
    runs when ``adjust`` is set, then counts pointwise.
    """
    scores, labels = _validate_scores_labels(scores, labels)
    threshold = float(threshold)
    with np.errstate(invalid="ignore"):
        preds = scores > threshold
    if adjust:
        preds = _adjust(preds, labels)
    tp = int(np.sum(preds & labels))
    fp = int(np.sum(preds & ~labels))
    fn = int(np.sum(~preds & labels))
    return _report(tp, fp, fn, threshold)


def sweep_curve(scores, labels, *, adjust: bool = True) -> list[EvalReport]:
    """Evaluate every meaningful threshold, descending.

    Candidates are +inf, every distinct finite score, and -inf; the
    first report flags nothing and the last flags every point with a
    non-NaN score. Counts are maintained incrementally as points cross
    the threshold.
    """
    scores, labels = _validate_scores_labels(scores, labels)
    runs = _label_runs(labels)
    run_id = np.full(scores.size, -1)
    run_len = []
    for rid, (start, stop) in enumerate(runs):
        run_id[start:stop] = rid
        run_len.append(stop - start)
    n_label_points = int(labels.sum())

    finite = np.isfinite(scores)
    order = np.argsort(scores[finite], kind="stable")[::-1]
    idx_desc = np.nonzero(finite)[0][order]
    sorted_scores = scores[idx_desc]

    if not adjust:
        run_id = np.where(labels, np.arange(scores.size), -1)
        run_len = [1] * scores.size

    reports = []
    tp = 0
    fp = 0
    run_hits = [0] * len(run_len)
    reports.append(_report(0, 0, n_label_points, math.inf))

    pos = 0
    n_sorted = len(idx_desc)
    while pos < n_sorted:
        s = sorted_scores[pos]
        # absorb every point with this exact score, then report the
        # threshold equal to it: flagged = strictly greater only, so the
        # report uses the state from before this group
        group_start = pos
        while pos < n_sorted and sorted_scores[pos] == s:
            pos += 1
        reports.append(_report(tp, fp, n_label_points - tp, float(s)))
        for j in idx_desc[group_start:pos]:
            rid = run_id[j]
            if rid >= 0:
                if run_hits[rid] == 0:
                    tp += run_len[rid]
                run_hits[rid] += 1
            else:
                fp += 1
    reports.append(_report(tp, fp, n_label_points - tp, -math.inf))
    return reports


def best_f1_sweep(scores, labels, *, adjust: bool = True) -> EvalReport:
    """The threshold maximizing F1, with its report.

    Ties prefer higher precision, then the lower threshold.
    """
    best = None
    for report in sweep_curve(scores, labels, adjust=adjust):
        if best is None or report.f1 > best.f1 \
                or (report.f1 == best.f1 and report.precision >= best.precision):
            best = report
    return best
