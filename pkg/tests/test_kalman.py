import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssgpfa import (
    GaussianState,
    InputError,
    LinearObservationModel,
    NumericalError,
    ParameterError,
    cosine,
    discretize,
    matern32,
    observation_log_likelihood,
    predict,
    prior_covariance,
    robust_filter,
    rts_smooth,
    univariate_observation_model,
    update,
)
from ssgpfa.kernels import DiscretizedTransition


def scalar_obs(noise=1.0):
    return LinearObservationModel(H=[[1.0, 0.0]], R=[noise], offset=[0.0])


class TestPredict:
    def test_frozen_scalar(self):
        state = GaussianState([1.0], [[1.0]])
        trans = DiscretizedTransition(np.array([[0.5]]), np.array([[0.75]]), 1.0)
        out = predict(state, trans)
        assert out.mean[0] == pytest.approx(0.5)
        assert out.cov[0, 0] == pytest.approx(1.0)

    def test_cov_symmetrized(self):
        k = matern32(1.3)
        state = GaussianState(np.zeros(2), k.stationary_cov)
        out = predict(state, discretize(k, 0.37))
        np.testing.assert_allclose(out.cov, out.cov.T)


class TestUpdate:
    def test_frozen_scalar(self):
        # m=0, P=1, H=1, R=1, y=1 -> gain 1/2
        state = GaussianState([0.0, 0.0], np.diag([1.0, 1.0]))
        new, v, S = update(state, np.array([1.0]), scalar_obs())
        assert new.mean[0] == pytest.approx(0.5)
        assert new.cov[0, 0] == pytest.approx(0.5)
        assert v[0] == pytest.approx(1.0)
        assert S[0, 0] == pytest.approx(2.0)

    def test_joseph_form_matches_standard(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            L = rng.standard_normal((3, 3))
            P = L @ L.T + 0.1 * np.eye(3)
            H = rng.standard_normal((2, 3))
            r = rng.uniform(0.1, 2.0, 2)
            y = rng.standard_normal(2)
            state = GaussianState(rng.standard_normal(3), P)
            obs = LinearObservationModel(H=H, R=r, offset=np.zeros(2))
            new, v, S = update(state, y, obs)
            gain = P @ H.T @ np.linalg.inv(S)
            np.testing.assert_allclose(new.cov, P - gain @ S @ gain.T,
                                       atol=1e-10)
            np.testing.assert_allclose(new.mean, state.mean + gain @ v, atol=1e-10)

    def test_partial_mask_equals_subset_model(self):
        rng = np.random.default_rng(1)
        P = np.eye(3) * 2.0
        H = rng.standard_normal((4, 3))
        r = rng.uniform(0.2, 1.0, 4)
        offset = rng.standard_normal(4)
        y = rng.standard_normal(4)
        y[1] = np.nan
        mask = np.array([True, True, False, True])
        state = GaussianState(np.zeros(3), P)
        obs = LinearObservationModel(H=H, R=r, offset=offset)
        new, v, S = update(state, y, obs, mask)
        keep = np.array([True, False, False, True])  # mask AND finite
        sub = LinearObservationModel(H=H[keep], R=r[keep], offset=offset[keep])
        new2, v2, S2 = update(state, y[keep], sub)
        np.testing.assert_allclose(new.mean, new2.mean, atol=1e-12)
        np.testing.assert_allclose(new.cov, new2.cov, atol=1e-12)
        np.testing.assert_allclose(v, v2)
        np.testing.assert_allclose(S, S2)

    def test_all_missing_leaves_state(self):
        state = GaussianState([0.3, -0.1], np.eye(2))
        new, v, S = update(state, np.array([np.nan]), scalar_obs())
        assert new is state
        assert v.size == 0 and S.size == 0

    def test_singular_innovation_raises(self):
        H = np.array([[1.0, 0.0], [1.0, 0.0]])
        obs = LinearObservationModel(H=H, R=[1e-16, 1e-16], offset=np.zeros(2))
        state = GaussianState(np.zeros(2), np.eye(2))
        with pytest.raises(NumericalError):
            update(state, np.array([1.0, 1.0]), obs)

    def test_noise_matrix_diagonal_accepted(self):
        obs = LinearObservationModel(H=np.eye(2), R=np.diag([0.5, 0.7]),
                                     offset=np.zeros(2))
        np.testing.assert_allclose(obs.R, [0.5, 0.7])
        with pytest.raises(ParameterError):
            LinearObservationModel(H=np.eye(2), R=[[0.5, 0.1], [0.1, 0.7]],
                                   offset=np.zeros(2))


class TestLogLikelihood:
    def test_frozen_values(self):
        joint, marg = observation_log_likelihood(np.array([1.0]), np.array([[2.0]]))
        assert joint == pytest.approx(-1.5155121234846454, abs=1e-12)
        assert marg[0] == joint
        joint0, _ = observation_log_likelihood(np.array([0.0]), np.array([[1.0]]))
        assert joint0 == pytest.approx(-0.9189385332046727, abs=1e-12)

    def test_matches_dense_formula(self):
        rng = np.random.default_rng(3)
        L = rng.standard_normal((3, 3))
        S = L @ L.T + np.eye(3)
        v = rng.standard_normal(3)
        joint, marg = observation_log_likelihood(v, S)
        expected = -0.5 * (3 * math.log(2 * math.pi) + np.linalg.slogdet(S)[1]
                           + v @ np.linalg.solve(S, v))
        assert joint == pytest.approx(expected, rel=1e-12)
        np.testing.assert_allclose(
            marg, [-0.5 * (math.log(2 * math.pi * S[i, i]) + v[i] ** 2 / S[i, i])
                   for i in range(3)])

    def test_empty_is_nan(self):
        joint, marg = observation_log_likelihood(np.empty(0), np.empty((0, 0)))
        assert math.isnan(joint) and marg.size == 0

    def test_nonpositive_diag_raises(self):
        with pytest.raises(NumericalError):
            observation_log_likelihood(np.array([1.0]), np.array([[-1.0]]))


def dense_gp_lml(timestamps, y, kernel, noise_variance):
    """Batch GP marginal log-likelihood from the Gram matrix."""
    T = len(timestamps)
    gram = np.empty((T, T))
    for i in range(T):
        for j in range(T):
            gram[i, j] = prior_covariance(kernel, abs(timestamps[i] - timestamps[j]))
    cov = gram + noise_variance * np.eye(T)
    chol = np.linalg.cholesky(cov)
    alpha = np.linalg.solve(chol, y)
    return float(-0.5 * T * math.log(2 * math.pi) - np.log(np.diag(chol)).sum()
                 - 0.5 * alpha @ alpha)


class TestFilter:
    def test_log_likelihood_matches_dense_gp(self):
        rng = np.random.default_rng(7)
        t = np.cumsum(rng.uniform(0.3, 1.5, 40))
        kernel = matern32(lengthscale=3.0, variance=1.2)
        y = rng.standard_normal(40)
        nv = 0.3
        steps = list(robust_filter(t, y, kernel, univariate_observation_model(kernel, nv),
                                   robust=False))
        streaming = sum(s.log_likelihood for s in steps)
        dense = dense_gp_lml(t, y, kernel, nv)
        assert streaming == pytest.approx(dense, rel=1e-9)

    def test_robust_gate_skips_outlier(self):
        rng = np.random.default_rng(11)
        t = np.arange(60.0)
        kernel = matern32(lengthscale=5.0)
        nv = 0.05
        y = np.sin(0.2 * t) + 0.1 * rng.standard_normal(60)
        y[30] += 25.0
        obs = univariate_observation_model(kernel, nv)
        steps = list(robust_filter(t, y, kernel, obs, rho=1e-12))
        assert not steps[30].accepted
        np.testing.assert_array_equal(steps[30].updated.mean, steps[30].predicted.mean)
        loose = list(robust_filter(t, y, kernel, obs, robust=False))
        assert loose[30].accepted

    def test_anchor_spans_back_to_last_accepted(self):
        # after a rejected point, the next transition covers the gap
        # since the last accepted point, not since the rejection
        t = np.array([0.0, 1.0, 2.0])
        kernel = matern32(lengthscale=2.0)
        obs = univariate_observation_model(kernel, 0.1)
        y = np.array([0.0, 50.0, 0.1])
        steps = list(robust_filter(t, y, kernel, obs, rho=1e-12))
        assert [s.accepted for s in steps] == [True, False, True]
        # reproduce step 2's prediction by propagating step 0's state over dt=2
        manual = predict(steps[0].updated, discretize(kernel, 2.0))
        np.testing.assert_allclose(steps[2].predicted.mean, manual.mean, atol=1e-12)
        np.testing.assert_allclose(steps[2].predicted.cov, manual.cov, atol=1e-12)

    def test_missing_rows_scored_nan(self):
        t = np.arange(5.0)
        y = np.array([0.1, np.nan, 0.2, np.nan, 0.3])
        kernel = matern32(2.0)
        steps = list(robust_filter(t, y, kernel, univariate_observation_model(kernel, 0.1)))
        assert math.isnan(steps[1].log_likelihood)
        assert steps[1].accepted
        assert np.isnan(steps[1].marginal_log_likelihoods).all()

    def test_timestamps_must_increase(self):
        kernel = matern32(1.0)
        obs = univariate_observation_model(kernel, 0.1)
        with pytest.raises(InputError, match="index 2"):
            list(robust_filter([0.0, 1.0, 1.0], np.zeros(3), kernel, obs))

    def test_rho_validation(self):
        kernel = matern32(1.0)
        obs = univariate_observation_model(kernel, 0.1)
        with pytest.raises(ParameterError):
            list(robust_filter([0.0], np.zeros(1), kernel, obs, rho=0.0))
        with pytest.raises(ParameterError):
            list(robust_filter([0.0], np.zeros(1), kernel, obs, rho=-3.0))

    def test_log_rho_overrides_rho(self):
        t = np.arange(20.0)
        y = np.zeros(20)
        y[10] = 30.0
        kernel = matern32(3.0)
        obs = univariate_observation_model(kernel, 0.05)
        via_rho = [s.accepted for s in robust_filter(t, y, kernel, obs, rho=1e-12)]
        via_log = [s.accepted for s in
                   robust_filter(t, y, kernel, obs, rho=0.5, log_rho=math.log(1e-12))]
        assert via_rho == via_log


class TestSmoother:
    def test_matches_batch_gp_posterior(self):
        # smoothed means must equal the dense GP regression posterior
        rng = np.random.default_rng(13)
        T = 30
        t = np.cumsum(rng.uniform(0.4, 1.2, T))
        kernel = matern32(lengthscale=4.0, variance=0.9)
        nv = 0.2
        y = np.sin(0.4 * t) + 0.3 * rng.standard_normal(T)
        obs = univariate_observation_model(kernel, nv)
        steps = list(robust_filter(t, y, kernel, obs, robust=False))
        transitions = [discretize(kernel, float(t[j + 1] - t[j])) for j in range(T - 1)]
        smoothed = rts_smooth([s.updated for s in steps], transitions)
        h = kernel.emission
        means = np.array([h @ s.mean for s in smoothed])
        vars_ = np.array([h @ s.cov @ h for s in smoothed])

        gram = np.empty((T, T))
        for i in range(T):
            for j in range(T):
                gram[i, j] = prior_covariance(kernel, abs(t[i] - t[j]))
        solve = np.linalg.solve(gram + nv * np.eye(T), np.eye(T))
        post_mean = gram @ solve @ y
        post_var = np.diag(gram - gram @ solve @ gram)
        np.testing.assert_allclose(means, post_mean, atol=1e-8)
        np.testing.assert_allclose(vars_, post_var, atol=1e-8)

    def test_length_mismatch(self):
        with pytest.raises(ParameterError):
            rts_smooth([GaussianState([0.0], [[1.0]])] * 3, [])

    def test_single_state_passthrough(self):
        s = GaussianState([0.5], [[2.0]])
        out = rts_smooth([s], [])
        assert out[0] is s


@settings(max_examples=25, deadline=None)
@given(
    data=st.lists(st.floats(-3.0, 3.0), min_size=2, max_size=15),
    noise=st.floats(0.05, 1.0),
)
def test_filter_covariances_stay_psd(data, noise):
    kernel = matern32(2.0) + cosine(5.0, 0.4)
    t = np.arange(len(data), dtype=float)
    obs = univariate_observation_model(kernel, noise)
    for step in robust_filter(t, np.array(data), kernel, obs, robust=False):
        eigs = np.linalg.eigvalsh(step.updated.cov)
        assert eigs.min() >= -1e-8
