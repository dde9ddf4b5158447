import math

import numpy as np
import pytest

from ssgpfa import (
    Attribution,
    ParameterError,
    attribute,
    matern32,
    project_latents,
    reconstruction_error,
    scalar_nll,
)
from ssgpfa.model import SsgpfaModel


def make_model(C, mode="orthogonal", offset=None, noise=0.1):
    D, K = np.asarray(C).shape
    return SsgpfaModel(
        kernels=tuple(matern32(10.0) for _ in range(K)),
        loading=C,
        offset=np.zeros(D) if offset is None else offset,
        noise=noise,
        mode=mode,
    )


def orthonormal(D, K, seed=0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((D, K)))
    return q


class TestProjectLatents:
    def test_orthogonal_is_transpose(self):
        C = orthonormal(5, 2, seed=1)
        d = np.arange(5.0)
        model = make_model(C, offset=d)
        y = np.linspace(-1, 1, 5)
        np.testing.assert_allclose(project_latents(model, y), C.T @ (y - d))

    def test_unconstrained_warns_and_solves(self):
        C = np.array([[2.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
        model = make_model(C, mode="unconstrained")
        v_true = np.array([0.3, -0.7])
        y = C @ v_true
        with pytest.warns(UserWarning, match="least squares"):
            v = project_latents(model, y)
        np.testing.assert_allclose(v, v_true, atol=1e-12)

    def test_missing_dims_use_observed_rows(self):
        C = orthonormal(4, 2, seed=2)
        model = make_model(C)
        v_true = np.array([1.0, -2.0])
        y = C @ v_true
        y[1] = np.nan
        v = project_latents(model, y)
        keep = np.array([True, False, True, True])
        expected, *_ = np.linalg.lstsq(C[keep], y[keep], rcond=None)
        np.testing.assert_allclose(v, expected)

    def test_all_missing_is_nan(self):
        model = make_model(orthonormal(3, 2))
        v = project_latents(model, np.full(3, np.nan))
        assert np.isnan(v).all()

    def test_wrong_length_rejected(self):
        model = make_model(orthonormal(3, 2))
        with pytest.raises(ParameterError):
            project_latents(model, np.zeros(4))


class TestScalarNll:
    def test_standard_normal_at_mean(self):
        assert scalar_nll(0.0, 0.0, 1.0) == pytest.approx(0.9189385332046727, abs=1e-12)

    def test_quadratic_in_residual(self):
        base = scalar_nll(0.0, 0.0, 2.0)
        assert scalar_nll(2.0, 0.0, 2.0) == pytest.approx(base + 1.0)

    def test_degenerate_variance_is_inf(self):
        assert scalar_nll(1.0, 0.0, 0.0) == math.inf
        assert scalar_nll(1.0, 0.0, -0.5) == math.inf
        assert scalar_nll(1.0, 0.0, math.inf) == math.inf


class TestReconstructionError:
    def test_in_subspace_is_zero(self):
        C = orthonormal(6, 2, seed=3)
        model = make_model(C)
        v = np.array([0.5, 1.5])
        assert reconstruction_error(model, C @ v, v) == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_offset_measured_exactly(self):
        C = np.eye(4)[:, :2]
        model = make_model(C)
        y = np.array([0.3, -0.2, 2.0, 0.0])  # third dim outside span(C)
        v = project_latents(model, y)
        assert reconstruction_error(model, y, v) == pytest.approx(2.0)

    def test_nan_when_latents_unavailable(self):
        model = make_model(orthonormal(3, 2))
        assert math.isnan(reconstruction_error(model, np.zeros(3), np.full(2, np.nan)))


class TestAttribute:
    def test_culprit_latent_has_largest_nll(self):
        C = orthonormal(5, 3, seed=4)
        model = make_model(C)
        means = np.zeros(3)
        variances = np.full(3, 0.5)
        v = np.array([0.1, 4.0, -0.2])  # latent 1 is far off its prediction
        out = list(attribute(model, [(C @ v, means, variances)]))
        assert len(out) == 1
        att = out[0]
        assert isinstance(att, Attribution)
        np.testing.assert_allclose(att.projected_latents, v, atol=1e-12)
        assert int(np.argmax(att.per_latent_nll)) == 1

    def test_nll_matches_scalar_formula(self):
        C = orthonormal(4, 2, seed=5)
        model = make_model(C)
        y = np.array([0.2, -0.4, 0.9, 0.1])
        means = np.array([0.1, -0.3])
        variances = np.array([0.4, 0.9])
        att = next(attribute(model, [(y, means, variances)]))
        v = C.T @ y
        expected = [scalar_nll(v[k], means[k], variances[k]) for k in range(2)]
        np.testing.assert_allclose(att.per_latent_nll, expected)

    def test_generator_is_lazy(self):
        model = make_model(orthonormal(3, 1))
        calls = []

        def stream():
            for i in range(3):
                calls.append(i)
                yield (np.zeros(3), np.zeros(1), np.ones(1))

        gen = attribute(model, stream())
        assert calls == []
        next(gen)
        assert calls == [1] or calls == [0, 1] or len(calls) <= 2
