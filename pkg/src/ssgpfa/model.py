"""Latent-factor time-series model with GP-structured latents.

Observations y_t in R^D are explained by K independent latent Gaussian
processes z_t in R^K through a loading matrix:

    y_t = C z_t + d + eps_t,     eps_t ~ N(0, Psi),  Psi diagonal.

Each latent carries its own state-space kernel, so inference over a
stream of T points costs O(T), not O(T^3). Two training modes are
supported:

``orthogonal``
    C is kept orthonormal (C^T C = I) and the noise isotropic
    (Psi = sigma^2 I). The posterior over latents then factorizes, so
    the E-step runs K small independent filters against the projected
    pseudo-observations u_t = C^T (y_t - d), and per-latent anomaly
    attribution is exact.

``unconstrained``
    C and diagonal Psi are free; inference runs one joint filter whose
    state stacks all latents.

Training is EM with closed-form M-step updates; kernel hyperparameters
stay fixed during EM. Univariate series skip EM entirely and fit kernel
hyperparameters by maximizing the filter likelihood.

Online scoring emits, per point, the negative predictive log-likelihood
(the anomaly score), per-dimension marginal scores, the robust
accept/skip decision, per-latent attribution scores, and the latent
reconstruction error.
"""

from __future__ import annotations

import ast
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from functools import reduce
from typing import Callable, Iterator, Sequence

import numpy as np

from . import explain
from .errors import ConfigError, InputError, NumericalError, ParameterError
from .kalman import (
    GaussianState,
    LinearObservationModel,
    TransitionCache,
    observation_log_likelihood,
    predict,
    robust_filter,
    rts_smooth,
    univariate_observation_model,
    update,
)
from .kernels import StateSpaceKernel, add, discretize, matern32, parse_kernel

__all__ = [
    "SsgpfaModel",
    "LatentPosterior",
    "ScoredPoint",
    "assemble_joint",
    "e_step",
    "m_step",
    "orthogonalize",
    "fit_em",
    "fa_likelihood",
    "fit_univariate",
    "score_online",
    "train_series",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
    "DEFAULT_UNIVARIATE_KERNEL",
    "DEFAULT_MULTIVARIATE_LENGTHSCALES",
]

_LOG_2PI = math.log(2.0 * math.pi)

# Reproduction defaults: four medium-to-short range Matern latents for
# multivariate streams, and a drifting quasi-periodic combination for
# univariate ones (hyperparameters are refined by fit_univariate).
DEFAULT_MULTIVARIATE_LENGTHSCALES = (130.0, 200.0, 50.0, 10.0)
DEFAULT_UNIVARIATE_KERNEL = (
    "brownian(diffusion=0.05) "
    "+ matern32(lengthscale=25.0, variance=1.0) * cosine(period=50.0, variance=1.0)"
)

_MODEL_FORMAT = "ssgpfa-model"
_MODEL_VERSION = 1


def default_multivariate_kernels(n_latents: int) -> list[StateSpaceKernel]:
    """Default latent kernels when none are configured."""
    if n_latents > len(DEFAULT_MULTIVARIATE_LENGTHSCALES):
        raise ConfigError(
            f"no default kernels for {n_latents} latents; pass explicit kernel expressions"
        )
    return [matern32(lengthscale=ls, variance=1.0)
            for ls in DEFAULT_MULTIVARIATE_LENGTHSCALES[:n_latents]]


@dataclass(frozen=True, eq=False)
class SsgpfaModel:
    """Trained latent-factor model. Immutable.

    ``noise`` stores the diagonal of Psi; in orthogonal mode all entries
    equal sigma^2. ``input_mean``/``input_std`` record the
    standardization applied to raw inputs before scoring (None when the
    model operates on already-scaled data).
    """

    kernels: tuple
    loading: np.ndarray
    offset: np.ndarray
    noise: np.ndarray
    mode: str = "orthogonal"
    training_log: tuple = ()
    input_mean: np.ndarray | None = None
    input_std: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("orthogonal", "unconstrained"):
            raise ConfigError(f"unknown mode {self.mode!r}")
        kernels = tuple(self.kernels)
        if not kernels:
            raise ConfigError("model needs at least one latent kernel")
        C = np.array(self.loading, dtype=float)
        if C.ndim != 2:
            raise ParameterError(f"loading must be a matrix, got shape {C.shape}")
        D, K = C.shape
        if K != len(kernels):
            raise ConfigError(f"loading has {K} columns but {len(kernels)} kernels given")
        if K > D:
            raise ConfigError(f"more latents ({K}) than observed dimensions ({D})")
        offset = np.array(self.offset, dtype=float)
        noise = np.array(self.noise, dtype=float)
        if noise.ndim == 0:
            noise = np.full(D, float(noise))
        if offset.shape != (D,):
            raise ParameterError(f"offset must have length {D}, got {offset.shape}")
        if noise.shape != (D,):
            raise ParameterError(f"noise diagonal must have length {D}, got {noise.shape}")
        if not np.all(np.isfinite(noise)) or not np.all(noise > 0.0):
            raise ParameterError("noise variances must be positive and finite")
        if self.mode == "orthogonal":
            gram_gap = np.linalg.norm(C.T @ C - np.eye(K))
            if gram_gap > 1e-8:
                raise ConfigError(
                    f"orthogonal mode requires orthonormal loadings (||C^T C - I|| = {gram_gap:.2e})"
                )
        for name in ("input_mean", "input_std"):
            v = getattr(self, name)
            if v is not None:
                v = np.array(v, dtype=float)
                if v.shape != (D,):
                    raise ParameterError(f"{name} must have length {D}, got {v.shape}")
                object.__setattr__(self, name, v)
        if self.input_std is not None and not np.all(self.input_std > 0.0):
            raise ParameterError("input_std entries must be positive")
        object.__setattr__(self, "kernels", kernels)
        object.__setattr__(self, "loading", C)
        object.__setattr__(self, "offset", offset)
        object.__setattr__(self, "noise", noise)
        object.__setattr__(self, "training_log", tuple(float(x) for x in self.training_log))

    @property
    def n_dims(self) -> int:
        return self.loading.shape[0]

    @property
    def n_latents(self) -> int:
        return self.loading.shape[1]

    @property
    def sigma2(self) -> float:
        """Isotropic noise variance (orthogonal mode)."""
        if self.mode != "orthogonal":
            raise ConfigError("sigma2 is defined in orthogonal mode only")
        return float(self.noise[0])


@dataclass(frozen=True, eq=False)
class LatentPosterior:
    """Smoothed posterior over the latent values.

    ``means[t]`` and ``covs[t]`` describe z_t given the whole series;
    in orthogonal mode ``covs`` is diagonal by construction. ``used``
    flags the time steps that were absorbed (robust training may skip
    some). ``latent_states`` holds the full smoothed state per latent.
    """

    means: np.ndarray
    covs: np.ndarray
    log_likelihood: float
    used: np.ndarray
    latent_states: tuple = field(default=(), repr=False)


@dataclass(frozen=True, eq=False)
class ScoredPoint:
    """Scoring output for one stream point.

    ``score`` is the negative joint predictive log-likelihood; higher
    means more anomalous. ``accepted`` is False when the robust gate
    skipped the point. ``latent_nlls[k]`` scores the projected latent
    coordinate under its predictive distribution (latent predictive
    variance plus the observation noise carried into the projection);
    the largest entry attributes the anomaly. ``reconstruction_error``
    is the distance from the latent subspace.
    """

    timestamp: float
    score: float
    marginal_nlls: np.ndarray
    accepted: bool
    latent_nlls: np.ndarray
    reconstruction_error: float


def assemble_joint(model: SsgpfaModel):
    """Joint state-space form stacking every latent.

    Returns ``(kernel, obs, slices)``: the block dynamics kernel, the
    observation model with emission rows C[:, k] h_k^T and noise
    diag(Psi) plus offset d, and the per-latent state slices.
    """
    kernel = reduce(add, model.kernels)
    blocks = []
    slices = []
    lo = 0
    for k, kern in enumerate(model.kernels):
        hi = lo + kern.state_dim
        slices.append(slice(lo, hi))
        blocks.append(np.outer(model.loading[:, k], kern.emission))
        lo = hi
    H = np.hstack(blocks)
    obs = LinearObservationModel(H=H, R=model.noise.copy(), offset=model.offset.copy())
    return kernel, obs, slices


def _chain_transitions(kernel: StateSpaceKernel, timestamps: np.ndarray):
    """Consecutive-step transitions with caching for repeated gaps."""
    cache = TransitionCache(kernel)
    out = []
    for j in range(1, len(timestamps)):
        dt = float(timestamps[j] - timestamps[j - 1])
        if dt <= 0.0:
            raise InputError(
                f"timestamps must be strictly increasing (index {j})"
            )
        out.append(cache.get(dt))
    return out


def _as_time_array(timestamps, T: int) -> np.ndarray:
    t = np.asarray(timestamps, dtype=float)
    if t.shape != (T,):
        raise InputError(f"need {T} timestamps, got shape {t.shape}")
    return t


def _normalize_mask(values: np.ndarray, mask) -> np.ndarray:
    finite = np.isfinite(values)
    if mask is None:
        return finite
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != values.shape:
        raise InputError("mask shape must match values shape")
    return mask & finite


def e_step(model: SsgpfaModel, values: np.ndarray, timestamps, mask=None,
           robust_log_rho: float | None = None) -> LatentPosterior:
    """Smoothed latent posterior given the observations.

    Orthogonal mode runs K independent per-latent filters and smoothers
    against the projected pseudo-observations (exact thanks to the
    orthonormal loadings and isotropic noise); unconstrained mode runs
    the joint filter. ``robust_log_rho`` enables the robust gate during
    training: points whose predictive log-likelihood falls at or below
    it are not absorbed and are excluded from ``used``.

    Rows with some (but not all) dimensions missing are handled exactly
    per latent in orthogonal mode, but the joint likelihood bookkeeping
    for such rows treats latents independently, which is an
    approximation; the unconstrained path is exact under missingness.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    D, T = values.shape
    if D != model.n_dims:
        raise ConfigError(f"model expects {model.n_dims} dimensions, data has {D}")
    t_arr = _as_time_array(timestamps, T)
    mask = _normalize_mask(values, mask)
    if model.mode == "orthogonal":
        return _e_step_parallel(model, values, t_arr, mask, robust_log_rho)
    return _e_step_joint(model, values, t_arr, mask, robust_log_rho)


def _e_step_parallel(model, values, timestamps, mask, robust_log_rho):
    D, T = values.shape
    K = model.n_latents
    C, d, sigma2 = model.loading, model.offset, model.sigma2

    chain = [_chain_transitions(k, timestamps) for k in model.kernels]
    states = [GaussianState(np.zeros(k.state_dim), k.initial_cov.copy()) for k in model.kernels]
    scalar_obs = [univariate_observation_model(k, sigma2) for k in model.kernels]
    emissions = [k.emission for k in model.kernels]

    stored = [[] for _ in range(K)]
    used = np.zeros(T, dtype=bool)
    total_ll = 0.0

    for i in range(T):
        if i > 0:
            predicted = [predict(states[k], chain[k][i - 1]) for k in range(K)]
        else:
            predicted = states
        y = values[:, i]
        row = mask[:, i]
        if not row.any():
            states = predicted
            for k in range(K):
                stored[k].append(predicted[k])
            continue

        mu_hat = np.array([emissions[k] @ predicted[k].mean for k in range(K)])
        s_pred = np.array([emissions[k] @ predicted[k].cov @ emissions[k] for k in range(K)])

        try:
            if row.all():
                r = y - d
                u = C.T @ r
                candidates = []
                lls = []
                for k in range(K):
                    cand, v, S = update(predicted[k], u[k:k + 1], scalar_obs[k])
                    ll_k, _ = observation_log_likelihood(v, S)
                    candidates.append(cand)
                    lls.append(ll_k)
                if D == K:
                    perp = 0.0
                else:
                    perp_sq = max(float(r @ r - u @ u), 0.0)
                    perp = -0.5 * ((D - K) * (_LOG_2PI + math.log(sigma2)) + perp_sq / sigma2)
                step_ll = sum(lls) + perp
            else:
                r_obs = (y - d)[row]
                C_obs = C[row]
                candidates = []
                for k in range(K):
                    c = C_obs[:, k]
                    n2 = float(c @ c)
                    if n2 <= 0.0:
                        candidates.append(predicted[k])
                        continue
                    pseudo = np.array([float(c @ r_obs) / n2])
                    obs_k = LinearObservationModel(
                        H=emissions[k][None, :], R=np.array([sigma2 / n2]), offset=np.zeros(1))
                    cand, _, _ = update(predicted[k], pseudo, obs_k)
                    candidates.append(cand)
                step_ll = _low_rank_gauss_loglik(
                    y[row], C_obs @ mu_hat + d[row], C_obs, s_pred, sigma2)
        except NumericalError as exc:
            raise NumericalError(f"time index {i}: {exc}") from None

        total_ll += step_ll
        accept = robust_log_rho is None or step_ll > robust_log_rho
        used[i] = accept
        states = candidates if accept else predicted
        for k in range(K):
            stored[k].append(states[k])

    means = np.zeros((T, K))
    covs = np.zeros((T, K, K))
    latent_states = []
    for k in range(K):
        try:
            smoothed = rts_smooth(stored[k], chain[k])
        except NumericalError as exc:
            raise NumericalError(f"latent {k}: {exc}") from None
        h = emissions[k]
        for t, st in enumerate(smoothed):
            means[t, k] = h @ st.mean
            covs[t, k, k] = h @ st.cov @ h
        latent_states.append(tuple(smoothed))
    return LatentPosterior(means, covs, float(total_ll), used, tuple(latent_states))


def _low_rank_gauss_loglik(y_obs, mean_obs, C_obs, latent_vars, sigma2):
    """log N(y; mean, C diag(latent_vars) C^T + sigma2 I) over observed dims."""
    cov = C_obs @ (latent_vars[:, None] * C_obs.T) + sigma2 * np.eye(len(y_obs))
    resid = y_obs - mean_obs
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise NumericalError("predictive covariance is not positive definite") from None
    alpha = np.linalg.solve(chol, resid)
    return float(-0.5 * len(y_obs) * _LOG_2PI - np.log(np.diag(chol)).sum()
                 - 0.5 * alpha @ alpha)


def _e_step_joint(model, values, timestamps, mask, robust_log_rho):
    T = values.shape[1]
    K = model.n_latents
    kernel, obs, slices = assemble_joint(model)
    chain = _chain_transitions(kernel, timestamps)

    state = GaussianState(np.zeros(kernel.state_dim), kernel.initial_cov.copy())
    filtered = []
    used = np.zeros(T, dtype=bool)
    total_ll = 0.0
    for i in range(T):
        predicted = predict(state, chain[i - 1]) if i > 0 else state
        row = mask[:, i]
        if not row.any():
            state = predicted
            filtered.append(predicted)
            continue
        try:
            candidate, v, S = update(predicted, values[:, i], obs, row)
            step_ll, _ = observation_log_likelihood(v, S)
        except NumericalError as exc:
            raise NumericalError(f"time index {i}: {exc}") from None
        total_ll += step_ll
        accept = robust_log_rho is None or step_ll > robust_log_rho
        used[i] = accept
        state = candidate if accept else predicted
        filtered.append(state)
    smoothed = rts_smooth(filtered, chain)

    means = np.zeros((T, K))
    covs = np.zeros((T, K, K))
    latent_states = [[] for _ in range(K)]
    emissions = [k.emission for k in model.kernels]
    for t, st in enumerate(smoothed):
        for j in range(K):
            mj, sj = emissions[j], slices[j]
            means[t, j] = mj @ st.mean[sj]
            latent_states[j].append(GaussianState(
                st.mean[sj].copy(), st.cov[sj, sj].copy()))
            for k in range(K):
                covs[t, j, k] = mj @ st.cov[sj, slices[k]] @ emissions[k]
    return LatentPosterior(means, covs, float(total_ll), used, tuple(map(tuple, latent_states)))


def m_step(posterior: LatentPosterior, values: np.ndarray, mask=None):
    """Closed-form maximizers of the expected complete-data log-likelihood.

    Solves the coupled normal equations for (C, d) jointly (centered
    form), then the diagonal noise given both:

        C* = sum (y_t - ybar)(mu_t - mubar)^T
             [sum Sigma_t + (mu_t - mubar)(mu_t - mubar)^T]^{-1}
        d* = ybar - C* mubar
        Psi*_ii = 1/T sum [ (y - C* mu - d*)_i^2 + (C* Sigma_t C*^T)_ii ]

    Missing entries are excluded per dimension. Returns (C, d, psi_diag).
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    D, T = values.shape
    means, covs = posterior.means, posterior.covs
    if means.shape[0] != T:
        raise ParameterError("posterior length does not match the data")
    mask = _normalize_mask(values, mask)
    K = means.shape[1]

    if mask.all():
        ybar = values.mean(axis=1)
        mubar = means.mean(axis=0)
        Yc = values - ybar[:, None]
        Mc = means - mubar
        Syz = Yc @ Mc
        Szz = covs.sum(axis=0) + Mc.T @ Mc
        C = _solve_loading(Szz, Syz)
        d = ybar - C @ mubar
        resid = values - C @ means.T - d[:, None]
        cross = np.einsum("ik,kl,il->i", C, covs.sum(axis=0), C)
        psi = (resid ** 2).sum(axis=1) / T + cross / T
        return C, d, np.maximum(psi, 1e-12)

    C = np.zeros((D, K))
    d = np.zeros(D)
    psi = np.zeros(D)
    for i in range(D):
        sel = mask[i]
        n = int(sel.sum())
        if n == 0:
            raise InputError(f"dimension {i} has no observed values")
        y_i = values[i, sel]
        mu_i = means[sel]
        ybar = y_i.mean()
        mubar = mu_i.mean(axis=0)
        Mc = mu_i - mubar
        Szz = covs[sel].sum(axis=0) + Mc.T @ Mc
        Syz = (y_i - ybar) @ Mc
        c_i = _solve_loading(Szz, Syz[None, :])[0]
        C[i] = c_i
        d[i] = ybar - c_i @ mubar
        resid = y_i - mu_i @ c_i - d[i]
        cross = np.einsum("k,tkl,l->", c_i, covs[sel], c_i)
        psi[i] = (resid ** 2).sum() / n + cross / n
    return C, d, np.maximum(psi, 1e-12)


def _solve_loading(Szz: np.ndarray, Syz: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(Szz)
    if not np.isfinite(cond) or cond > 1e12:
        warnings.warn("singular latent second-moment matrix; applying ridge regularization",
                      stacklevel=3)
        Szz = Szz + 1e-9 * np.eye(Szz.shape[0])
    return np.linalg.solve(Szz, Syz.T).T


def orthogonalize(loading: np.ndarray) -> np.ndarray:
    """Nearest matrix with orthonormal columns (polar factor U V^T)."""
    C = np.asarray(loading, dtype=float)
    if C.ndim != 2:
        raise ParameterError(f"loading must be a matrix, got shape {C.shape}")
    U, s, Vt = np.linalg.svd(C, full_matrices=False)
    if s[0] <= 0.0 or s[-1] <= max(C.shape) * np.finfo(float).eps * s[0]:
        raise NumericalError(
            f"loading matrix is rank deficient (smallest singular value {s[-1]:.3e})"
        )
    return U @ Vt


def fit_em(values: np.ndarray, timestamps, kernels: Sequence[StateSpaceKernel] | Sequence[str], *,
           mode: str = "orthogonal", max_iters: int = 50, tol: float = 1e-6,
           mask=None, robust_rho: float | None = None,
           callback: Callable | None = None) -> SsgpfaModel:
    """Fit loading, offset and noise by EM with fixed latent kernels.

    Initialization takes the top-K left singular vectors of the data as
    loadings. Iterations stop when the relative change of the data
    log-likelihood drops below ``tol`` or after ``max_iters``; the
    returned model is the one that produced the final training-log
    entry. ``robust_rho`` activates the robust gate during training
    (off by default: every point is absorbed).

    ``callback(iteration, model, posterior)`` is invoked after every
    E-step, before the parameter update.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    D, T = values.shape
    kernels = [parse_kernel(k) if isinstance(k, str) else k for k in kernels]
    K = len(kernels)
    if K < 1:
        raise ConfigError("need at least one latent kernel")
    if K > D:
        raise ConfigError(f"more latents ({K}) than observed dimensions ({D})")
    if T < 2:
        raise InputError("need at least two observations to fit")
    if T < K:
        raise InputError(f"need at least {K} observations for {K} latents")
    if mode not in ("orthogonal", "unconstrained"):
        raise ConfigError(f"unknown mode {mode!r}")
    if max_iters < 1:
        raise ConfigError("max_iters must be at least 1")
    t_arr = _as_time_array(timestamps, T)
    mask = _normalize_mask(values, mask)
    robust_log_rho = None
    if robust_rho is not None:
        if robust_rho <= 0.0:
            raise ConfigError("robust_rho must be positive")
        robust_log_rho = math.log(robust_rho)

    filled = np.where(mask, values, 0.0)
    U = np.linalg.svd(filled, full_matrices=False)[0]
    C = U[:, :K]
    d = np.zeros(D)
    resid = filled - C @ (C.T @ filled)
    psi = np.maximum(resid.var(axis=1), 1e-6)
    noise = np.full(D, float(psi.mean())) if mode == "orthogonal" else psi

    log = []
    prev_ll = None
    model = SsgpfaModel(tuple(kernels), C, d, noise, mode=mode)
    for i in range(max_iters):
        post = e_step(model, values, t_arr, mask, robust_log_rho)
        ll = post.log_likelihood
        if not math.isfinite(ll):
            raise NumericalError(f"non-finite log-likelihood at EM iteration {i}")
        log.append(ll)
        model = replace(model, training_log=tuple(log))
        if callback is not None:
            callback(i, model, post)
        if prev_ll is not None and abs(ll - prev_ll) / max(abs(prev_ll), 1.0) < tol:
            break
        prev_ll = ll
        if i == max_iters - 1:
            break
        eff_mask = mask & post.used[None, :]
        C_new, d_new, psi_new = m_step(post, values, eff_mask)
        if mode == "orthogonal":
            C_new = orthogonalize(C_new)
            noise = np.full(D, float(psi_new.mean()))
        else:
            noise = psi_new
        model = SsgpfaModel(tuple(kernels), C_new, d_new, noise, mode=mode,
                            training_log=tuple(log))
    return model


def fa_likelihood(model: SsgpfaModel, values: np.ndarray, timestamps=None,
                  mask=None) -> float:
    """Static factor-analysis log-likelihood of the data.

    Treats each time point independently under the marginal
    y_t ~ N(d, Psi + C Ktt C^T), where Ktt is the diagonal of latent
    prior variances at that point. Invariant under rotations of C when
    the latent prior variances are equal.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    D, T = values.shape
    if D != model.n_dims:
        raise ConfigError(f"model expects {model.n_dims} dimensions, data has {D}")
    mask = _normalize_mask(values, mask)
    C, d = model.loading, model.offset

    if all(k.stationary for k in model.kernels):
        prior_vars = np.array([float(k.emission @ k.stationary_cov @ k.emission)
                               for k in model.kernels])
        per_t_vars = [prior_vars] * T
    else:
        if timestamps is None:
            raise ConfigError("nonstationary latents need timestamps for the prior variance")
        t_arr = _as_time_array(timestamps, T)
        per_t_vars = _prior_variance_paths(model.kernels, t_arr)

    total = 0.0
    chol_cache = {}
    for t in range(T):
        sel = mask[:, t]
        if not sel.any():
            continue
        tau = per_t_vars[t]
        key = (tau.tobytes(), sel.tobytes())
        entry = chol_cache.get(key)
        if entry is None:
            cov = C[sel] @ (tau[:, None] * C[sel].T) + np.diag(model.noise[sel])
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                raise NumericalError(f"marginal covariance not positive definite at step {t}") \
                    from None
            entry = chol
            chol_cache[key] = entry
        resid = values[sel, t] - d[sel]
        alpha = np.linalg.solve(entry, resid)
        total += (-0.5 * sel.sum() * _LOG_2PI - np.log(np.diag(entry)).sum()
                  - 0.5 * float(alpha @ alpha))
    return float(total)


def _prior_variance_paths(kernels, timestamps):
    T = len(timestamps)
    out = np.zeros((T, len(kernels)))
    for k, kern in enumerate(kernels):
        if kern.stationary:
            out[:, k] = float(kern.emission @ kern.stationary_cov @ kern.emission)
            continue
        P = kern.initial_cov.copy()
        h = kern.emission
        out[0, k] = h @ P @ h
        for j in range(1, T):
            trans = discretize(kern, float(timestamps[j] - timestamps[j - 1]))
            P = trans.A @ P @ trans.A.T + trans.Q
            out[j, k] = h @ P @ h
    return list(out)


# --- online scoring -------------------------------------------------------


def score_online(model: SsgpfaModel, stream, *, rho: float = 1e-12,
                 log_rho: float | None = None, robust: bool = True,
                 robust_scope: str = "joint") -> Iterator[ScoredPoint]:
    """Score a stream point by point.

    ``stream`` is either a series object (``timestamps``, ``values``,
    ``mask`` attributes) or an iterable of ``(timestamp, values[, mask])``
    rows. Raw rows are standardized with the model's stored mean/std
    when present. The robust gate absorbs a point only if its joint
    predictive log-likelihood exceeds log(rho); ``robust_scope="per_dim"``
    instead masks individual dimensions that fall below the threshold
    (running the joint filter). Yields one :class:`ScoredPoint` per row
    in a single streaming pass with O(1) memory.
    """
    if log_rho is None:
        rho = float(rho)
        if not math.isfinite(rho) or rho <= 0.0:
            raise ParameterError(f"rho must be a positive finite likelihood, got {rho!r}")
        log_rho = math.log(rho)
    if robust_scope not in ("joint", "per_dim"):
        raise ConfigError(f"unknown robust scope {robust_scope!r}")
    rows = _as_row_iter(stream)
    if model.mode == "orthogonal" and robust_scope == "joint":
        return _score_parallel(model, rows, log_rho, robust)
    return _score_joint(model, rows, log_rho, robust, robust_scope)


def _as_row_iter(stream):
    if hasattr(stream, "timestamps") and hasattr(stream, "values"):
        mask = getattr(stream, "mask", None)

        def gen():
            for i, t in enumerate(stream.timestamps):
                yield float(t), np.asarray(stream.values)[:, i], \
                    None if mask is None else np.asarray(mask)[:, i]
        return gen()

    def gen_rows():
        for row in stream:
            if len(row) == 2:
                t, y = row
                m = None
            else:
                t, y, m = row[0], row[1], row[2]
            yield float(t), np.atleast_1d(np.asarray(y, dtype=float)), m
    return gen_rows()


def _standardize_row(model, y):
    if model.input_mean is None:
        return y
    return (y - model.input_mean) / model.input_std


def _check_row(model, y, i):
    if y.shape != (model.n_dims,):
        raise ConfigError(
            f"row {i} has {y.shape[0] if y.ndim == 1 else y.shape} values, "
            f"model expects {model.n_dims}"
        )


def _projected_noise_vars(C_obs: np.ndarray, psi_obs: np.ndarray) -> np.ndarray:
    """Observation-noise variance carried into each projected coordinate.

    The least-squares projection v = (C^T C)^{-1} C^T (y - d) maps the
    observation noise through G^{-1} C^T, so coordinate k inherits
    [G^{-1} C^T Psi C G^{-1}]_kk on top of its latent predictive
    variance. Singular Grams (fewer observed dims than latents) fall
    back to the pseudoinverse, matching the minimum-norm projection.
    """
    G = C_obs.T @ C_obs
    try:
        Ginv = np.linalg.inv(G)
    except np.linalg.LinAlgError:
        Ginv = np.linalg.pinv(G)
    M = Ginv @ C_obs.T
    return np.einsum("kd,d,kd->k", M, psi_obs, M)


def _score_parallel(model, rows, log_rho, robust):
    D, K = model.n_dims, model.n_latents
    C, d, sigma2 = model.loading, model.offset, model.sigma2
    kernels = model.kernels
    emissions = [k.emission for k in kernels]
    scalar_obs = [univariate_observation_model(k, sigma2) for k in kernels]
    states = [GaussianState(np.zeros(k.state_dim), k.initial_cov.copy()) for k in kernels]
    caches = [TransitionCache(k) for k in kernels]
    anchor = None
    prev_t = None
    bitwise_univariate = (D == 1 and K == 1)

    for i, (t, y_raw, row_mask) in enumerate(rows):
        if prev_t is not None and not t > prev_t:
            raise InputError(f"timestamps must be strictly increasing (index {i})")
        prev_t = t
        _check_row(model, y_raw, i)
        y = _standardize_row(model, y_raw)
        row = np.isfinite(y) if row_mask is None else (np.asarray(row_mask, bool) & np.isfinite(y))

        if anchor is None:
            predicted = states
        else:
            dt = t - anchor
            predicted = [predict(states[k], caches[k].get(dt)) for k in range(K)]

        if not row.any():
            nan_k = np.full(K, np.nan)
            yield ScoredPoint(t, float("nan"), np.full(D, np.nan), True, nan_k, float("nan"))
            continue

        mu_hat = np.array([emissions[k] @ predicted[k].mean for k in range(K)])
        s_pred = np.array([emissions[k] @ predicted[k].cov @ emissions[k] for k in range(K)])

        try:
            if row.all():
                r = y - d
                u = C.T @ r
                candidates = []
                lls = []
                marg1 = None
                for k in range(K):
                    cand, v, S = update(predicted[k], u[k:k + 1], scalar_obs[k])
                    ll_k, marg_k = observation_log_likelihood(v, S)
                    candidates.append(cand)
                    lls.append(ll_k)
                    marg1 = marg_k
                if bitwise_univariate:
                    joint = lls[0]
                    marginals = marg1.copy()
                else:
                    if D == K:
                        perp = 0.0
                    else:
                        perp_sq = max(float(r @ r - u @ u), 0.0)
                        perp = -0.5 * ((D - K) * (_LOG_2PI + math.log(sigma2))
                                       + perp_sq / sigma2)
                    joint = sum(lls) + perp
                    mean_y = C @ mu_hat + d
                    var_y = (C ** 2) @ s_pred + sigma2
                    marginals = -0.5 * (_LOG_2PI + np.log(var_y) + (y - mean_y) ** 2 / var_y)
                v_proj = u
            else:
                r_obs = (y - d)[row]
                C_obs = C[row]
                candidates = []
                for k in range(K):
                    c = C_obs[:, k]
                    n2 = float(c @ c)
                    if n2 <= 0.0:
                        candidates.append(predicted[k])
                        continue
                    pseudo = np.array([float(c @ r_obs) / n2])
                    obs_k = LinearObservationModel(
                        H=emissions[k][None, :], R=np.array([sigma2 / n2]), offset=np.zeros(1))
                    cand, _, _ = update(predicted[k], pseudo, obs_k)
                    candidates.append(cand)
                joint = _low_rank_gauss_loglik(
                    y[row], C_obs @ mu_hat + d[row], C_obs, s_pred, sigma2)
                marginals = np.full(D, np.nan)
                mean_y = C[row] @ mu_hat + d[row]
                var_y = (C[row] ** 2) @ s_pred + sigma2
                marginals[row] = -0.5 * (_LOG_2PI + np.log(var_y)
                                         + (y[row] - mean_y) ** 2 / var_y)
                v_proj, *_ = np.linalg.lstsq(C_obs, r_obs, rcond=None)
        except NumericalError as exc:
            raise NumericalError(f"time index {i}: {exc}") from None

        if row.all():
            noise_vars = np.full(K, sigma2)  # orthonormal C: G = I
        else:
            noise_vars = _projected_noise_vars(C[row], np.full(int(row.sum()), sigma2))
        full_marginals = marginals if marginals.shape == (D,) else _expand(marginals, row, D)
        latent_nlls = np.array([
            explain.scalar_nll(float(v_proj[k]), float(mu_hat[k]),
                               float(s_pred[k] + noise_vars[k]))
            for k in range(K)
        ])
        recon = explain.reconstruction_error(model, y, v_proj, row)

        accepted = (not robust) or (joint > log_rho)
        if accepted:
            states = [replace(c, last_accepted_time=t) for c in candidates]
            anchor = t
        yield ScoredPoint(t, -joint, _neg(full_marginals), accepted, latent_nlls, recon)


def _neg(a: np.ndarray) -> np.ndarray:
    return -a


def _expand(values, mask, D):
    out = np.full(D, np.nan)
    out[mask] = values
    return out


def _score_joint(model, rows, log_rho, robust, robust_scope):
    D, K = model.n_dims, model.n_latents
    kernel, obs, slices = assemble_joint(model)
    emissions = [k.emission for k in model.kernels]
    state = GaussianState(np.zeros(kernel.state_dim), kernel.initial_cov.copy())
    cache = TransitionCache(kernel)
    anchor = None
    prev_t = None

    for i, (t, y_raw, row_mask) in enumerate(rows):
        if prev_t is not None and not t > prev_t:
            raise InputError(f"timestamps must be strictly increasing (index {i})")
        prev_t = t
        _check_row(model, y_raw, i)
        y = _standardize_row(model, y_raw)
        row = np.isfinite(y) if row_mask is None else (np.asarray(row_mask, bool) & np.isfinite(y))

        if anchor is None:
            predicted = state
        else:
            predicted = predict(state, cache.get(t - anchor))

        if not row.any():
            yield ScoredPoint(t, float("nan"), np.full(D, np.nan), True,
                              np.full(K, np.nan), float("nan"))
            continue

        try:
            candidate, v, S = update(predicted, y, obs, row)
            joint, marg = observation_log_likelihood(v, S)
        except NumericalError as exc:
            raise NumericalError(f"time index {i}: {exc}") from None
        marginals = _expand(marg, row, D)

        if robust and robust_scope == "per_dim":
            keep = row & (np.nan_to_num(marginals, nan=-np.inf) > log_rho)
            accepted = bool(keep.any())
            if accepted and not np.array_equal(keep, row):
                try:
                    candidate, _, _ = update(predicted, y, obs, keep)
                except NumericalError as exc:
                    raise NumericalError(f"time index {i}: {exc}") from None
        else:
            accepted = (not robust) or (joint > log_rho)

        mu_hat = np.array([emissions[k] @ predicted.mean[slices[k]] for k in range(K)])
        s_pred = np.array([
            emissions[k] @ predicted.cov[slices[k], slices[k]] @ emissions[k]
            for k in range(K)
        ])
        v_proj = explain.project_latents(model, y, row)
        noise_vars = _projected_noise_vars(model.loading[row], model.noise[row])
        latent_nlls = np.array([
            explain.scalar_nll(float(v_proj[k]), float(mu_hat[k]),
                               float(s_pred[k] + noise_vars[k]))
            for k in range(K)
        ])
        recon = explain.reconstruction_error(model, y, v_proj, row)

        if accepted:
            state = replace(candidate, last_accepted_time=t)
            anchor = t
        yield ScoredPoint(t, -joint, _neg(marginals), accepted, latent_nlls, recon)


# --- univariate hyperparameter fitting ------------------------------------


def fit_univariate(y: np.ndarray, timestamps,
                   kernel_expression: str | StateSpaceKernel = DEFAULT_UNIVARIATE_KERNEL, *,
                   noise_variance: float = 0.1, optimize: bool = True,
                   max_outer: int = 20) -> SsgpfaModel:
    """Fit a univariate GP model, optionally refining hyperparameters.

    Hyperparameters (all kernel parameters plus the observation-noise
    variance) are optimized in log space with L-BFGS-B and
    finite-difference gradients, capped at ``max_outer`` iterations.
    The best parameters seen are kept, so the result is never worse
    than the starting point. With ``optimize=False`` the given
    parameters are wrapped unchanged.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    T = y.shape[0]
    if T < 2:
        raise InputError("need at least two observations to fit")
    t_arr = _as_time_array(timestamps, T)
    if not math.isfinite(noise_variance) or noise_variance <= 0.0:
        raise ParameterError(f"noise_variance must be positive, got {noise_variance!r}")
    expr = kernel_expression.expression if isinstance(kernel_expression, StateSpaceKernel) \
        else str(kernel_expression)
    template = _KernelTemplate(expr)

    def negative_loglik(kernel: StateSpaceKernel, nv: float) -> float:
        obs = univariate_observation_model(kernel, nv)
        total = 0.0
        for step in robust_filter(t_arr, y[None, :], kernel, obs, robust=False):
            if math.isfinite(step.log_likelihood):
                total += step.log_likelihood
        return -total

    theta0 = np.log(np.append(template.values, noise_variance))
    best = {"f": math.inf, "theta": theta0}

    def objective(theta: np.ndarray) -> float:
        params = np.exp(theta)
        try:
            kernel = template.build(params[:-1])
            f = negative_loglik(kernel, float(params[-1]))
        except (ConfigError, ParameterError, NumericalError, FloatingPointError):
            return 1e12
        if not math.isfinite(f):
            return 1e12
        if f < best["f"]:
            best["f"] = f
            best["theta"] = theta.copy()
        return f

    objective(theta0)
    if optimize and not math.isfinite(best["f"]):
        raise NumericalError("initial hyperparameters give a non-finite likelihood")
    if optimize:
        from scipy.optimize import minimize

        minimize(objective, theta0, method="L-BFGS-B", options={"maxiter": max_outer})
    params = np.exp(best["theta"])
    kernel = template.build(params[:-1])
    nv = float(params[-1])
    return SsgpfaModel(
        kernels=(kernel,),
        loading=np.array([[1.0]]),
        offset=np.zeros(1),
        noise=np.array([nv]),
        mode="orthogonal",
        training_log=(-best["f"],) if math.isfinite(best["f"]) else (),
    )


class _KernelTemplate:
    """Kernel expression with hole-punched numeric parameters.

    Parses an expression once, records each constructor argument in
    left-to-right order, and rebuilds the kernel from a replacement
    parameter vector. Used to re-evaluate the filter likelihood while
    hyperparameters move during optimization.
    """

    def __init__(self, text: str):
        try:
            tree = ast.parse(text, mode="eval")
        except SyntaxError as exc:
            raise ConfigError(f"invalid kernel expression {text!r}: {exc}") from None
        self._tree = tree.body
        self.names: list[str] = []
        self.values_list: list[float] = []
        self._collect(self._tree)
        if not self.names:
            raise ConfigError(f"kernel expression {text!r} has no numeric parameters")
        self.build(self.values)

    @property
    def values(self) -> np.ndarray:
        return np.array(self.values_list, dtype=float)

    def _collect(self, node) -> None:
        if isinstance(node, ast.BinOp) and isinstance(node.op, (ast.Add, ast.Mult)):
            self._collect(node.left)
            self._collect(node.right)
            return
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name):
            ctor = node.func.id
            arg_names = {"matern32": ["lengthscale", "variance"],
                         "cosine": ["period", "variance"],
                         "brownian": ["diffusion"]}.get(ctor)
            if arg_names is None:
                raise ConfigError(f"unknown kernel constructor {ctor!r}")
            if len(node.args) > len(arg_names):
                raise ConfigError(f"too many arguments for {ctor}()")
            for pos, arg in enumerate(node.args):
                self.names.append(f"{ctor}.{arg_names[pos]}")
                self.values_list.append(float(_const_value(arg)))
            for kw in node.keywords:
                self.names.append(f"{ctor}.{kw.arg}")
                self.values_list.append(float(_const_value(kw.value)))
            return
        raise ConfigError("kernel expressions may only combine constructor calls with + and *")

    def build(self, params: Sequence[float]) -> StateSpaceKernel:
        it = iter(params)
        text = self._render(self._tree, it)
        return parse_kernel(text)

    def _render(self, node, it) -> str:
        if isinstance(node, ast.BinOp):
            left = self._render(node.left, it)
            right = self._render(node.right, it)
            if isinstance(node.op, ast.Add):
                return f"{left} + {right}"
            if isinstance(node.left, ast.BinOp) and isinstance(node.left.op, ast.Add):
                left = f"({left})"
            if isinstance(node.right, ast.BinOp) and isinstance(node.right.op, ast.Add):
                right = f"({right})"
            return f"{left} * {right}"
        ctor = node.func.id
        rendered = []
        arg_names = {"matern32": ["lengthscale", "variance"],
                     "cosine": ["period", "variance"],
                     "brownian": ["diffusion"]}[ctor]
        for pos in range(len(node.args)):
            rendered.append(f"{arg_names[pos]}={float(next(it))!r}")
        for kw in node.keywords:
            rendered.append(f"{kw.arg}={float(next(it))!r}")
        return f"{ctor}({', '.join(rendered)})"


def _const_value(node):
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
        return node.value
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, ast.USub):
        return -_const_value(node.operand)
    raise ConfigError("kernel parameters must be numeric literals")


# --- training entry point --------------------------------------------------


def train_series(series, *, kernels=None, mode: str = "orthogonal",
                 max_iters: int = 50, tol: float = 1e-6,
                 robust_rho: float | None = None, optimize: bool = True,
                 noise_variance: float = 0.1, max_outer: int = 20) -> SsgpfaModel:
    """Standardize a series and train the matching model type.

    Univariate input fits kernel hyperparameters directly
    (:func:`fit_univariate`); multivariate input runs EM with the given
    (or default) latent kernels. The returned model carries the
    standardization so it can score raw streams.
    """
    from .metrics import standardize

    values = np.atleast_2d(np.asarray(series.values, dtype=float))
    timestamps = np.asarray(series.timestamps, dtype=float)
    mask = getattr(series, "mask", None)
    mask = _normalize_mask(values, mask)
    masked = np.where(mask, values, np.nan)
    scaled, mean, std = standardize(masked)
    D = values.shape[0]

    if D == 1:
        expr = DEFAULT_UNIVARIATE_KERNEL
        if kernels:
            if len(kernels) > 1:
                raise ConfigError("univariate series take a single kernel expression")
            expr = kernels[0]
        model = fit_univariate(scaled[0], timestamps, expr,
                               noise_variance=noise_variance, optimize=optimize,
                               max_outer=max_outer)
    else:
        if kernels is None:
            n_latents = min(D, len(DEFAULT_MULTIVARIATE_LENGTHSCALES))
            kernels = default_multivariate_kernels(n_latents)
        model = fit_em(scaled, timestamps, kernels, mode=mode, max_iters=max_iters,
                       tol=tol, mask=mask, robust_rho=robust_rho)
    return replace(model, input_mean=mean, input_std=std)


# --- serialization ----------------------------------------------------------


def model_to_dict(model: SsgpfaModel) -> dict:
    """JSON-ready dictionary capturing the full model."""
    noise = model.noise
    if model.mode == "orthogonal":
        noise_entry = {"kind": "isotropic", "variance": float(noise[0])}
    else:
        noise_entry = {"kind": "diagonal", "variances": [float(x) for x in noise]}
    out = {
        "format": _MODEL_FORMAT,
        "format_version": _MODEL_VERSION,
        "mode": model.mode,
        "kernels": [k.expression for k in model.kernels],
        "loading": [[float(x) for x in row] for row in model.loading],
        "offset": [float(x) for x in model.offset],
        "noise": noise_entry,
        "training_log": list(model.training_log),
    }
    if model.input_mean is not None:
        out["standardization"] = {
            "mean": [float(x) for x in model.input_mean],
            "std": [float(x) for x in model.input_std],
        }
    return out


def model_from_dict(data: dict) -> SsgpfaModel:
    """Rebuild a model from :func:`model_to_dict` output.

    Rejects unknown formats and newer format versions with a
    :class:`ConfigError` naming the version, so stale readers fail
    loudly instead of misreading fields.
    """
    if not isinstance(data, dict):
        raise ConfigError("model document must be a JSON object")
    fmt = data.get("format")
    if fmt != _MODEL_FORMAT:
        raise ConfigError(f"not a model document (format {fmt!r})")
    version = data.get("format_version")
    if version != _MODEL_VERSION:
        raise ConfigError(
            f"unsupported model format version {version!r}; this build reads version "
            f"{_MODEL_VERSION}"
        )
    try:
        kernels = tuple(parse_kernel(text) for text in data["kernels"])
        loading = np.array(data["loading"], dtype=float)
        offset = np.array(data["offset"], dtype=float)
        noise_entry = data["noise"]
        if noise_entry["kind"] == "isotropic":
            noise = np.full(loading.shape[0], float(noise_entry["variance"]))
        elif noise_entry["kind"] == "diagonal":
            noise = np.array(noise_entry["variances"], dtype=float)
        else:
            raise ConfigError(f"unknown noise kind {noise_entry['kind']!r}")
        mode = data["mode"]
        training_log = tuple(data.get("training_log", ()))
    except KeyError as exc:
        raise ConfigError(f"model document is missing field {exc.args[0]!r}") from None
    std_entry = data.get("standardization")
    input_mean = input_std = None
    if std_entry is not None:
        input_mean = np.array(std_entry["mean"], dtype=float)
        input_std = np.array(std_entry["std"], dtype=float)
    return SsgpfaModel(kernels, loading, offset, noise, mode=mode,
                       training_log=training_log, input_mean=input_mean,
                       input_std=input_std)


def save_model(model: SsgpfaModel, path) -> None:
    """Write the model as indented JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path) -> SsgpfaModel:
    """Read a model written by :func:`save_model`."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read model file {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"model file {path} is not valid JSON: {exc}") from None
    return model_from_dict(data)
