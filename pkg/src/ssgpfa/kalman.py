"""Kalman filtering, robust streaming updates, and RTS smoothing.

The filter runs over irregularly sampled observations of a linear
Gaussian state-space model built from a :class:`~ssgpfa.kernels.StateSpaceKernel`.
Each step discretizes the kernel over the gap since the last accepted
observation, predicts, and conditionally updates:

    predict:  m' = A m,  P' = A P A^T + Q
    update:   v = y_obs - (H m' + offset)_obs
              S = H_obs P' H_obs^T + R_obs
              K = P' H_obs^T S^{-1}
              m'' = m' + K v
              P'' = (I - K H_obs) P' (I - K H_obs)^T + K R_obs K^T

The covariance update uses the Joseph form throughout, and every
computed covariance is symmetrized.

The robust variant gates each update on the predictive likelihood of
the incoming point: points whose joint log-likelihood falls at or below
``log(rho)`` are scored but not absorbed into the state, so outliers
cannot drag the posterior. The elapsed time for the next transition
always refers back to the most recently *accepted* point.

Missing values are handled by row-masking the observation model: only
the observed rows of H, R and the offset participate in an update. A
fully missing observation leaves the state untouched.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InputError, NumericalError, ParameterError
from .kernels import DiscretizedTransition, StateSpaceKernel, discretize

__all__ = [
    "GaussianState",
    "LinearObservationModel",
    "FilterStepResult",
    "TransitionCache",
    "predict",
    "update",
    "observation_log_likelihood",
    "robust_filter",
    "rts_smooth",
    "univariate_observation_model",
]

# Condition-number ceiling above which an innovation covariance is
# treated as singular.
_COND_LIMIT = 1e12

_LOG_2PI = math.log(2.0 * math.pi)


class TransitionCache:
    """Bounded memo of discretized transitions keyed by step length.

    Regularly spaced streams hit a single entry forever. A sustained
    rejection streak mints a new step length every point, so on
    overflow the store is dropped wholesale; the hot entries repopulate
    on the next accepted step.
    """

    MAX_ENTRIES = 512

    __slots__ = ("_kernel", "_store")

    def __init__(self, kernel: StateSpaceKernel):
        self._kernel = kernel
        self._store: dict[float, DiscretizedTransition] = {}

    def get(self, dt: float) -> DiscretizedTransition:
        trans = self._store.get(dt)
        if trans is None:
            if len(self._store) >= self.MAX_ENTRIES:
                self._store.clear()
            trans = discretize(self._kernel, dt)
            self._store[dt] = trans
        return trans


def _sym(m: np.ndarray) -> np.ndarray:
    return (m + m.T) / 2.0


@dataclass(frozen=True, eq=False)
class GaussianState:
    """Gaussian belief over the latent state.

    ``last_accepted_time`` records the timestamp of the most recent
    observation absorbed into this belief (None before any update).
    """

    mean: np.ndarray
    cov: np.ndarray
    last_accepted_time: float | None = None

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        if mean.ndim != 1:
            raise ParameterError(f"state mean must be a vector, got shape {mean.shape}")
        if cov.shape != (mean.size, mean.size):
            raise ParameterError(
                f"state covariance must be ({mean.size}, {mean.size}), got {cov.shape}"
            )
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


@dataclass(frozen=True, eq=False)
class LinearObservationModel:
    """Observation model y = H x + offset + noise, noise ~ N(0, diag(R)).

    ``R`` holds the diagonal of the observation-noise covariance; the
    noise is diagonal by construction.
    """

    H: np.ndarray
    R: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.asarray(self.R, dtype=float)
        if R.ndim == 2:
            off_diag = R - np.diag(np.diag(R))
            if np.abs(off_diag).max(initial=0.0) > 0.0:
                raise ParameterError("observation noise covariance must be diagonal")
            R = np.diag(R).copy()
        offset = np.asarray(self.offset, dtype=float)
        D = H.shape[0]
        if R.shape != (D,):
            raise ParameterError(f"noise diagonal must have length {D}, got {R.shape}")
        if offset.shape != (D,):
            raise ParameterError(f"offset must have length {D}, got {offset.shape}")
        if not np.all(R > 0.0):
            raise ParameterError("observation noise variances must be positive")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "offset", offset)

    @property
    def n_outputs(self) -> int:
        return self.H.shape[0]


def univariate_observation_model(kernel: StateSpaceKernel,
                                 noise_variance: float) -> LinearObservationModel:
    """Scalar observation of the GP value with the given noise variance."""
    return LinearObservationModel(
        H=kernel.emission[None, :],
        R=np.array([float(noise_variance)]),
        offset=np.zeros(1),
    )


@dataclass(frozen=True, eq=False)
class FilterStepResult:
    """One step of a filtering pass.

    ``marginal_log_likelihoods`` has one entry per output dimension;
    missing dimensions carry NaN. ``accepted`` is False exactly when the
    robust gate rejected the point, in which case ``updated`` equals
    ``predicted``.
    """

    timestamp: float
    predicted: GaussianState
    updated: GaussianState
    log_likelihood: float
    marginal_log_likelihoods: np.ndarray
    accepted: bool
    transition: DiscretizedTransition | None = field(default=None, repr=False)


def predict(state: GaussianState, transition: DiscretizedTransition) -> GaussianState:
    """Propagate the belief through one discretized transition."""
    A, Q = transition.A, transition.Q
    mean = A @ state.mean
    cov = _sym(A @ state.cov @ A.T + Q)
    return GaussianState(mean, cov, state.last_accepted_time)


def update(state: GaussianState, y: np.ndarray, obs: LinearObservationModel,
           mask: np.ndarray | None = None):
    """Condition the belief on an observation vector.

    Parameters
    ----------
    state : GaussianState
        Predicted belief at the observation time.
    y : ndarray, shape (D,)
        Observation; entries may be NaN where missing.
    obs : LinearObservationModel
        Emission, noise diagonal and offset.
    mask : ndarray of bool, shape (D,), optional
        True where observed. Defaults to the finite entries of ``y``.

    Returns
    -------
    (new_state, innovation, innovation_cov)
        Innovation and its covariance cover the observed rows only. A
        fully missing observation returns the state unchanged with
        empty innovation arrays.
    """
    y = np.asarray(y, dtype=float)
    D = obs.n_outputs
    if y.shape != (D,):
        raise ParameterError(f"observation must have length {D}, got {y.shape}")
    if mask is None:
        mask = np.isfinite(y)
    else:
        mask = np.asarray(mask, dtype=bool) & np.isfinite(y)
    if not mask.any():
        return state, np.empty(0), np.empty((0, 0))

    H = obs.H[mask]
    r = obs.R[mask]
    v = y[mask] - (H @ state.mean + obs.offset[mask])
    P = state.cov
    S = _sym(H @ P @ H.T + np.diag(r))
    if np.linalg.cond(S) > _COND_LIMIT:
        raise NumericalError(
            f"innovation covariance is numerically singular (cond > {_COND_LIMIT:.0e})"
        )
    gain = np.linalg.solve(S, H @ P).T
    mean = state.mean + gain @ v
    ikh = np.eye(P.shape[0]) - gain @ H
    cov = _sym(ikh @ P @ ikh.T + (gain * r) @ gain.T)
    return GaussianState(mean, cov, state.last_accepted_time), v, S


def observation_log_likelihood(innovation: np.ndarray, innovation_cov: np.ndarray):
    """Joint and per-dimension Gaussian log-likelihoods of an innovation.

    Returns ``(joint, marginals)`` where ``joint`` is
    log N(v; 0, S) and ``marginals[i]`` is log N(v_i; 0, S_ii). Empty
    innovations (fully missing observations) yield NaN and an empty
    marginal array.
    """
    v = np.asarray(innovation, dtype=float).ravel()
    S = np.asarray(innovation_cov, dtype=float)
    d = v.size
    if d == 0:
        return float("nan"), np.empty(0)
    if S.shape != (d, d):
        raise ParameterError(f"innovation covariance must be ({d}, {d}), got {S.shape}")
    diag = np.diag(S)
    if np.any(diag <= 0.0):
        raise NumericalError("innovation covariance has a nonpositive diagonal entry")
    marginals = -0.5 * (_LOG_2PI + np.log(diag) + v * v / diag)
    if d == 1:
        return float(marginals[0]), marginals
    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NumericalError("innovation covariance is not positive definite") from None
    alpha = solve_triangular(chol, v, lower=True, check_finite=False)
    joint = -0.5 * (d * _LOG_2PI) - np.log(np.diag(chol)).sum() - 0.5 * float(alpha @ alpha)
    return float(joint), marginals


def _initial_state(kernel: StateSpaceKernel) -> GaussianState:
    return GaussianState(np.zeros(kernel.state_dim), kernel.initial_cov.copy(), None)


def robust_filter(timestamps: Sequence[float], values: np.ndarray,
                  kernel: StateSpaceKernel, obs: LinearObservationModel, *,
                  rho: float = 1e-12, log_rho: float | None = None,
                  robust: bool = True,
                  mask: np.ndarray | None = None) -> Iterator[FilterStepResult]:
    """Stream a (possibly robust) filtering pass over a series.

    Parameters
    ----------
    timestamps : sequence of float
        Strictly increasing observation times.
    values : ndarray, shape (D, T) or (T,)
        Observations; NaN marks missing entries.
    kernel : StateSpaceKernel
        Latent dynamics.
    obs : LinearObservationModel
        Observation model with D outputs.
    rho, log_rho : float
        Acceptance threshold on the predictive likelihood; a point is
        absorbed only if its joint log-likelihood exceeds ``log(rho)``
        (``log_rho`` overrides ``rho`` when given).
    robust : bool
        With False every point is absorbed regardless of likelihood.
    mask : ndarray of bool, shape (D, T), optional
        True where observed; combined with the finite entries of
        ``values``.

    Yields
    ------
    FilterStepResult per observation, in order. O(1) memory in the
    stream length. Fully missing observations are scored as NaN, leave
    the state untouched and do not advance the accepted-time anchor.
    """
    if log_rho is None:
        rho = float(rho)
        if not math.isfinite(rho) or rho <= 0.0:
            raise ParameterError(f"rho must be a positive finite likelihood, got {rho!r}")
        log_rho = math.log(rho)
    else:
        log_rho = float(log_rho)
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    D = obs.n_outputs
    if values.shape[0] != D:
        raise ParameterError(
            f"values must have {D} rows to match the observation model, got {values.shape[0]}"
        )
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != values.shape:
            raise ParameterError("mask shape must match values shape")

    state = _initial_state(kernel)
    anchor = None  # timestamp of the most recent accepted observation
    prev_t = None
    cache = TransitionCache(kernel)

    for i, t in enumerate(timestamps):
        t = float(t)
        if prev_t is not None and not t > prev_t:
            raise InputError(
                f"timestamps must be strictly increasing (index {i}: {t!r} after {prev_t!r})"
            )
        prev_t = t

        if anchor is None:
            transition = None
            predicted = state
        else:
            transition = cache.get(t - anchor)
            predicted = predict(state, transition)

        y = values[:, i]
        row_mask = np.isfinite(y) if mask is None else (mask[:, i] & np.isfinite(y))
        try:
            candidate, v, S = update(predicted, y, obs, row_mask)
            joint, marg = observation_log_likelihood(v, S)
        except NumericalError as exc:
            raise NumericalError(f"time index {i}: {exc}") from None

        marginals = np.full(D, np.nan)
        marginals[row_mask] = marg

        if not row_mask.any():
            yield FilterStepResult(t, predicted, predicted, joint, marginals, True, transition)
            continue

        accepted = (not robust) or (joint > log_rho)
        if accepted:
            state = replace(candidate, last_accepted_time=t)
            anchor = t
            updated = state
        else:
            updated = predicted
        yield FilterStepResult(t, predicted, updated, joint, marginals, accepted, transition)


def rts_smooth(filtered: Sequence[GaussianState],
               transitions: Sequence[DiscretizedTransition]) -> list[GaussianState]:
    """Rauch-Tung-Striebel smoothing over a filtered trajectory.

    Parameters
    ----------
    filtered : sequence of GaussianState, length T
        Filtering posteriors in time order.
    transitions : sequence of DiscretizedTransition, length T - 1
        ``transitions[j]`` maps state j to state j + 1.

    Returns
    -------
    list of GaussianState with the full-trajectory posteriors.
    """
    filtered = list(filtered)
    transitions = list(transitions)
    T = len(filtered)
    if T == 0:
        return []
    if len(transitions) != T - 1:
        raise ParameterError(
            f"need {T - 1} transitions for {T} states, got {len(transitions)}"
        )
    smoothed = [None] * T
    smoothed[-1] = filtered[-1]
    for j in range(T - 2, -1, -1):
        A, Q = transitions[j].A, transitions[j].Q
        m, P = filtered[j].mean, filtered[j].cov
        m_pred = A @ m
        P_pred = _sym(A @ P @ A.T + Q)
        try:
            gain = np.linalg.solve(P_pred, A @ P).T
        except np.linalg.LinAlgError:
            raise NumericalError(
                f"singular predicted covariance in smoothing step {j}"
            ) from None
        nxt = smoothed[j + 1]
        mean = m + gain @ (nxt.mean - m_pred)
        cov = _sym(P + gain @ (nxt.cov - P_pred) @ gain.T)
        smoothed[j] = GaussianState(mean, cov, filtered[j].last_accepted_time)
    return smoothed
