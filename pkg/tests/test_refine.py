import numpy as np
import pytest

from oracles import conv_matrix, decimation_matrix, max_rel_err, numeric_grad
from pixsub.degrade import DegradeSpec, bicubic_resize, degrade
from pixsub.image import Image
from pixsub.refine import (
    IterationTrace,
    RefinerSpec,
    data_residual,
    gradprior_gradient,
    gradprior_objective,
    refine_bicubic,
    refine_gradprior,
    refine_ibp,
)

RNG = np.random.default_rng(5)
SPEC = DegradeSpec(mode="gaussian", scale=2)


class TestBicubicRefiner:
    def test_scale_one_identity(self):
        img = Image(RNG.random((3, 5, 5)))
        assert refine_bicubic(img, 1) is img

    def test_constant(self):
        out = refine_bicubic(Image(np.full((3, 4, 6), 0.3)), 3)
        assert out.shape == (3, 12, 18)
        np.testing.assert_allclose(out.data, 0.3, atol=1e-14)

    def test_is_bicubic_resize(self):
        img = Image(RNG.random((1, 5, 7)))
        np.testing.assert_array_equal(refine_bicubic(img, 2).data, bicubic_resize(img, 14, 10).data)


class TestIBP:
    def test_fixed_point(self):
        hr = Image(RNG.random((3, 16, 16)))
        lr = degrade(hr, SPEC)
        out = refine_ibp(lr, hr, SPEC, iters=5, step=1.0)
        np.testing.assert_array_equal(out.data, hr.data)

    @pytest.mark.parametrize("step", [1.0, 0.4])
    def test_one_iteration_matrix_oracle(self, step):
        lr = Image(np.full((1, 4, 4), 0.6))
        K = conv_matrix(8, 8, SPEC.blur_kernel().taps)
        D = decimation_matrix(8, 8, 2)
        expected = step * K.T @ D.T @ lr.data[0].ravel()
        out = refine_ibp(lr, Image(np.zeros((1, 8, 8))), SPEC, iters=1, step=step)
        np.testing.assert_allclose(out.data[0].ravel(), expected, rtol=0, atol=1e-12)

    def test_general_iterations_match_matrix_recursion(self):
        A = decimation_matrix(8, 8, 2) @ conv_matrix(8, 8, SPEC.blur_kernel().taps)
        lr = Image(RNG.random((1, 4, 4)))
        x = RNG.random(64)
        init = Image(x.reshape(1, 8, 8))
        for _ in range(4):
            x = x + 0.8 * A.T @ (lr.data[0].ravel() - A @ x)
        out = refine_ibp(lr, init, SPEC, iters=4, step=0.8)
        np.testing.assert_allclose(out.data[0].ravel(), x, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("seed", range(3))
    def test_residual_non_increasing(self, seed):
        rng = np.random.default_rng(seed)
        lr = Image(rng.random((3, 8, 8)))
        trace = IterationTrace()
        refine_ibp(lr, Image(rng.random((3, 16, 16))), SPEC, iters=20, step=1.0, trace=trace)
        v = np.array(trace.values)
        assert len(v) == 21 and not trace.diverged
        assert np.all(np.diff(v) <= 1e-12)

    def test_divergence_guard_returns_best(self):
        lr = Image(RNG.random((1, 8, 8)))
        init = Image(RNG.random((1, 16, 16)))
        trace = IterationTrace()
        out = refine_ibp(lr, init, SPEC, iters=50, step=40.0, trace=trace)
        assert trace.diverged
        assert len(trace.values) < 51
        assert data_residual(out, lr, SPEC) == pytest.approx(min(trace.values), rel=1e-12)

    def test_output_shape_and_bad_init(self):
        lr = Image(RNG.random((3, 6, 6)))
        assert refine_ibp(lr, Image(np.zeros((3, 12, 12))), SPEC, iters=2).shape == (3, 12, 12)
        with pytest.raises(ValueError):
            refine_ibp(lr, Image(np.zeros((3, 10, 12))), SPEC)


class TestGradPrior:
    @pytest.mark.parametrize("seed", range(3))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        spec = DegradeSpec(mode="gaussian", scale=2, sigma=0.8, kernel_size=5)
        lr = Image(rng.random((1, 3, 3)))
        x = rng.random((1, 6, 6))
        lam = 0.3
        analytic = gradprior_gradient(x, lr, spec, lam)
        numeric = numeric_grad(lambda: gradprior_objective(x, lr, spec, lam), x, h=1e-6)
        assert max_rel_err(analytic, numeric, floor=1e-4) <= 1e-4

    def test_lambda_zero_tracks_ibp(self):
        lr = Image(RNG.random((1, 4, 4)))
        init = Image(RNG.random((1, 8, 8)))
        a = refine_ibp(lr, init, SPEC, iters=6, step=1.0)
        b = refine_gradprior(lr, init, SPEC, iters=6, step=0.5, lambda_prior=0.0)
        np.testing.assert_allclose(b.data, a.data, rtol=0, atol=1e-13)

    def test_lambda_zero_matrix_oracle(self):
        A = decimation_matrix(8, 8, 2) @ conv_matrix(8, 8, SPEC.blur_kernel().taps)
        lr = Image(RNG.random((1, 4, 4)))
        x = np.zeros(64)
        for _ in range(3):
            x = x - 0.3 * 2 * A.T @ (A @ x - lr.data[0].ravel())
        out = refine_gradprior(lr, Image(np.zeros((1, 8, 8))), SPEC, iters=3, step=0.3, lambda_prior=0.0)
        np.testing.assert_allclose(out.data[0].ravel(), x, rtol=0, atol=1e-12)

    def test_objective_non_increasing(self):
        lr = Image(RNG.random((3, 8, 8)))
        trace = IterationTrace()
        refine_gradprior(lr, Image(RNG.random((3, 16, 16))), SPEC, iters=25, step=0.05, lambda_prior=0.05, trace=trace)
        assert not trace.diverged
        assert np.all(np.diff(trace.values) <= 1e-12)

    def test_constant_is_stationary(self):
        lr = Image(np.full((1, 4, 4), 0.4))
        init = Image(np.full((1, 8, 8), 0.4))
        g = gradprior_gradient(init.data, lr, SPEC, 0.5)
        np.testing.assert_allclose(g, 0.0, atol=1e-14)
        out = refine_gradprior(lr, init, SPEC, iters=3, step=0.1, lambda_prior=0.5)
        np.testing.assert_allclose(out.data, 0.4, atol=1e-14)


class TestRefinerSpec:
    @pytest.mark.parametrize("bad", [dict(kind="dbpn"), dict(iters=0), dict(step=0.0), dict(lambda_prior=-1.0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            RefinerSpec(**bad)
