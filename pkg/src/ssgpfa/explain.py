"""Per-latent attribution of anomaly scores.

Once a point has been scored, the question "which latent process is
surprised?" is answered by projecting the observation back into latent
space and scoring each coordinate under that latent's one-step
predictive distribution. With an orthogonal loading matrix the
projection is a plain transpose; otherwise it falls back to the normal
equations (least squares), which mixes latents and is flagged with a
warning.

The reconstruction error ||(y - d) - C v|| measures how far the
observation lies outside the latent subspace altogether; offsets and
sensor faults that no latent can express show up here.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import ParameterError

__all__ = ["Attribution", "project_latents", "attribute"]

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True, eq=False)
class Attribution:
    """Latent-space view of one scored observation."""

    projected_latents: np.ndarray
    per_latent_nll: np.ndarray
    reconstruction_error: float


def project_latents(model, y: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Project an observation into latent coordinates.

    Orthogonal mode uses v = C^T (y - d). Unconstrained loadings are
    handled by least squares on the available rows, with a warning
    because the projection then blends latents.
    """
    C = model.loading
    y = np.asarray(y, dtype=float)
    if y.shape != (C.shape[0],):
        raise ParameterError(f"observation must have length {C.shape[0]}, got {y.shape}")
    if mask is None:
        mask = np.isfinite(y)
    else:
        mask = np.asarray(mask, dtype=bool) & np.isfinite(y)
    r = y - model.offset
    if model.mode == "orthogonal" and mask.all():
        return C.T @ r
    if model.mode != "orthogonal":
        warnings.warn(
            "projecting latents through non-orthogonal loadings via least squares; "
            "attributions may blend latents",
            stacklevel=2,
        )
    if not mask.any():
        return np.full(C.shape[1], np.nan)
    sol, *_ = np.linalg.lstsq(C[mask], r[mask], rcond=None)
    return sol


def scalar_nll(x: float, mean: float, var: float) -> float:
    """Negative log-density of N(mean, var) at x."""
    if var <= 0.0 or not math.isfinite(var):
        return math.inf
    return 0.5 * (_LOG_2PI + math.log(var) + (x - mean) ** 2 / var)


def attribute(model, points: Iterable[tuple]) -> Iterator[Attribution]:
    """Attribute scored points to latents.

    Parameters
    ----------
    model : SsgpfaModel
        Trained model providing loadings and offset.
    points : iterable of (y, latent_means, latent_vars[, mask])
        Observation vector plus the per-latent one-step predictive
        means and variances produced during the scoring pass.

    Yields
    ------
    Attribution per point. ``per_latent_nll[k]`` is the negative log
    density of the projected coordinate v_k under latent k's predictive
    distribution; the latent with the largest value is the natural
    culprit for an anomalous point.
    """
    C = model.loading
    for point in points:
        y, means, variances = point[0], np.asarray(point[1]), np.asarray(point[2])
        mask = point[3] if len(point) > 3 else None
        v = project_latents(model, y, mask)
        nll = np.array([
            scalar_nll(v[k], float(means[k]), float(variances[k]))
            for k in range(C.shape[1])
        ])
        yield Attribution(v, nll, reconstruction_error(model, y, v, mask))


def reconstruction_error(model, y: np.ndarray, v: np.ndarray,
                         mask: np.ndarray | None = None) -> float:
    """Euclidean distance between (y - d) and its latent reconstruction C v,
    restricted to observed dimensions."""
    y = np.asarray(y, dtype=float)
    if mask is None:
        mask = np.isfinite(y)
    else:
        mask = np.asarray(mask, dtype=bool) & np.isfinite(y)
    if not mask.any() or not np.all(np.isfinite(v)):
        return float("nan")
    resid = (y - model.offset)[mask] - model.loading[mask] @ v
    return float(np.linalg.norm(resid))
