import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bicubic_resize_plane, conv_matrix, decimation_matrix, direct_convolve
from pixsub.degrade import (
    DegradeSpec,
    Kernel,
    add_noise,
    bicubic_resize,
    bicubic_weights,
    convolve,
    convolve_planes_adjoint,
    decimate,
    default_kernel_size,
    degrade,
    gaussian_kernel,
)
from pixsub.formation import zero_upsample
from pixsub.image import Image

RNG = np.random.default_rng(20261018)


def ramp(h, w):
    return Image((4 * np.arange(h)[:, None] + np.arange(w)[None, :]).astype(float)[None] / 16.0)


class TestGaussianKernel:
    def test_delta_limit(self):
        k = gaussian_kernel(0.01, 3)
        assert k.taps[1, 1] >= 1 - 1e-9

    def test_center_to_edge_ratio(self):
        # ratio survives normalization; edge = side neighbour at distance 1
        k = gaussian_kernel(0.5, 3)
        assert k.taps[1, 1] / k.taps[0, 1] == pytest.approx(math.exp(2.0), rel=1e-12)

    @pytest.mark.parametrize("sigma, size", [(0.5, 3), (1.0, 7), (2.0, 13), (1.3, 5), (0.8, None)])
    def test_normalized(self, sigma, size):
        assert abs(gaussian_kernel(sigma, size).taps.sum() - 1.0) <= 1e-12

    def test_default_size_covers_three_sigma(self):
        assert default_kernel_size(1.0) == 7
        assert default_kernel_size(0.5) == 5
        assert gaussian_kernel(2.0).size == 13

    @pytest.mark.parametrize("sigma, size", [(1.0, 4), (0.0, 3), (-1.0, 3), (1.0, 1)])
    def test_invalid(self, sigma, size):
        with pytest.raises(ValueError):
            gaussian_kernel(sigma, size)


class TestConvolve:
    def test_identity_kernel(self):
        img = Image(RNG.random((3, 5, 6)))
        out = convolve(img, Kernel.identity(3))
        np.testing.assert_array_equal(out.data, img.data)

    def test_constant_preserved(self):
        img = Image(np.full((1, 6, 6), 0.37))
        np.testing.assert_allclose(convolve(img, gaussian_kernel(1.0)).data, 0.37, atol=1e-15)

    def test_box_on_ramp_matches_loops(self):
        img = ramp(4, 4)
        box = Kernel(np.full((3, 3), 1 / 9))
        expected = direct_convolve(img.data[0], box.taps)
        np.testing.assert_allclose(convolve(img, box).data[0], expected, rtol=0, atol=1e-15)

    def test_asymmetric_kernel_is_true_convolution(self):
        taps = RNG.random((3, 3))
        k = Kernel(taps / taps.sum())
        img = Image(RNG.random((1, 6, 5)))
        np.testing.assert_allclose(convolve(img, k).data[0], direct_convolve(img.data[0], k.taps), atol=1e-14)

    def test_kernel_too_large(self):
        with pytest.raises(ValueError):
            convolve(Image(np.zeros((1, 2, 5))), gaussian_kernel(1.0, 7))

    @pytest.mark.parametrize("h, w, sigma", [(16, 16, 1.0), (9, 13, 0.5), (5, 7, 1.5), (16, 11, 2.0)])
    def test_matches_explicit_matrix(self, h, w, sigma):
        k = gaussian_kernel(sigma)
        K = conv_matrix(h, w, k.taps)
        x = RNG.random((h, w))
        np.testing.assert_allclose(convolve(Image(x), k).data[0].ravel(), K @ x.ravel(), rtol=0, atol=1e-12)

    @pytest.mark.parametrize("h, w, sigma", [(16, 16, 1.0), (6, 9, 1.5), (8, 6, 2.0)])
    def test_adjoint_matches_matrix_transpose(self, h, w, sigma):
        k = gaussian_kernel(sigma)
        K = conv_matrix(h, w, k.taps)
        y = RNG.random((h, w))
        np.testing.assert_allclose(convolve_planes_adjoint(y, k).ravel(), K.T @ y.ravel(), rtol=0, atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
    def test_linearity(self, seed, a, b):
        rng = np.random.default_rng(seed)
        X, Y = rng.random((2, 3, 9, 8))
        k = gaussian_kernel(1.0)
        lhs = convolve(Image(a * X + b * Y), k).data
        rhs = a * convolve(Image(X), k).data + b * convolve(Image(Y), k).data
        np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-10)


class TestDecimate:
    def test_scale_one_identity(self):
        img = Image(RNG.random((3, 4, 4)))
        np.testing.assert_array_equal(decimate(img, 1).data, img.data)

    def test_phase(self):
        img = Image((4 * np.arange(4)[:, None] + np.arange(4)[None, :]).astype(float)[None] / 16)
        np.testing.assert_array_equal(decimate(img, 2).data[0] * 16, [[0, 2], [8, 10]])

    @pytest.mark.parametrize("h, w, s", [(8, 8, 2), (12, 9, 3), (16, 16, 4), (16, 12, 2)])
    def test_matches_selection_matrix(self, h, w, s):
        D = decimation_matrix(h, w, s)
        x = RNG.random((h, w))
        np.testing.assert_array_equal(decimate(Image(x), s).data[0].ravel(), D @ x.ravel())

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            decimate(Image(np.zeros((1, 5, 4))), 2)

    @pytest.mark.parametrize("s", [1, 2, 3, 4])
    def test_inverts_zero_upsample(self, s):
        lr = Image(RNG.random((3, 5, 4)))
        np.testing.assert_array_equal(decimate(zero_upsample(lr, s), s).data, lr.data)


class TestBicubic:
    def test_same_size_identity(self):
        img = Image(RNG.random((3, 7, 5)))
        np.testing.assert_allclose(bicubic_resize(img, 5, 7).data, img.data, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("scale", [2, 3, 4])
    def test_upscale_constant(self, scale):
        img = Image(np.full((1, 4, 5), 0.42))
        out = bicubic_resize(img, 5 * scale, 4 * scale)
        np.testing.assert_allclose(out.data, 0.42, atol=1e-14)

    def test_downscale_ramp_matches_scalar_oracle(self):
        img = ramp(8, 8)
        expected = bicubic_resize_plane(img.data[0], 4, 4)
        np.testing.assert_allclose(bicubic_resize(img, 4, 4).data[0], expected, rtol=0, atol=1e-10)

    @pytest.mark.parametrize("in_hw, out_hw", [((12, 12), (3, 3)), ((9, 6), (3, 2)), ((5, 4), (10, 8)), ((4, 4), (16, 16))])
    def test_random_resizes_match_oracle(self, in_hw, out_hw):
        x = RNG.random(in_hw)
        expected = bicubic_resize_plane(x, *out_hw)
        got = bicubic_resize(Image(x), out_hw[1], out_hw[0]).data[0]
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-10)

    def test_rows_sum_to_one(self):
        for n_in, n_out in [(10, 5), (10, 20), (9, 3), (7, 28)]:
            np.testing.assert_allclose(bicubic_weights(n_in, n_out).sum(axis=1), 1.0, atol=1e-14)

    def test_zero_size(self):
        with pytest.raises(ValueError):
            bicubic_resize(Image(np.zeros((1, 4, 4))), 0, 2)


class TestNoise:
    def test_zero_level_identity(self):
        img = Image(RNG.random((3, 4, 4)))
        np.testing.assert_array_equal(add_noise(img, 0.0, 5).data, img.data)

    def test_deterministic(self):
        img = Image(np.full((3, 16, 16), 0.5))
        np.testing.assert_array_equal(add_noise(img, 0.03, 9).data, add_noise(img, 0.03, 9).data)
        assert not np.array_equal(add_noise(img, 0.03, 9).data, add_noise(img, 0.03, 10).data)

    def test_std_matches_level(self):
        img = Image(np.full((1, 1000, 1000), 0.5))
        out = add_noise(img, 0.02, 1)
        assert abs(np.std(out.data) - 0.02) <= 0.05 * 0.02
        assert out.data.min() >= 0 and out.data.max() <= 1

    @pytest.mark.parametrize("level", [-0.01, 0.2])
    def test_bad_level(self, level):
        with pytest.raises(ValueError):
            add_noise(Image(np.zeros((1, 2, 2))), level, 0)


class TestDegrade:
    def test_scale_one_identity_kernel(self):
        img = Image(RNG.random((3, 6, 6)))
        spec = DegradeSpec(mode="gaussian", scale=1, kernel=Kernel.identity(1))
        np.testing.assert_array_equal(degrade(img, spec).data, img.data)

    def test_gaussian_mode_matches_matrix_oracles(self):
        img = ramp(4, 4)
        spec = DegradeSpec(mode="gaussian", scale=2, sigma=0.7, kernel_size=3)
        K = conv_matrix(4, 4, spec.blur_kernel().taps)
        D = decimation_matrix(4, 4, 2)
        expected = D @ K @ img.data[0].ravel()
        np.testing.assert_allclose(degrade(img, spec).data[0].ravel(), expected, rtol=0, atol=1e-12)

    def test_bicubic_mode_is_resize(self):
        img = Image(RNG.random((3, 12, 8)))
        spec = DegradeSpec(mode="bicubic", scale=4)
        np.testing.assert_array_equal(degrade(img, spec).data, bicubic_resize(img, 2, 3).data)

    def test_noise_applied_after_resampling(self):
        img = Image(np.full((1, 8, 8), 0.5))
        spec = DegradeSpec(mode="gaussian", scale=2, noise_level=0.05)
        clean = degrade(img, spec.noiseless())
        np.testing.assert_array_equal(degrade(img, spec, 4).data, add_noise(clean, 0.05, 4).data)

    def test_default_blur(self):
        spec = DegradeSpec(scale=3)
        assert spec.blur_sigma == 1.5
        assert spec.blur_kernel().size == 2 * math.ceil(4.5) + 1

    @pytest.mark.parametrize("bad", [dict(scale=5), dict(mode="box"), dict(sigma=-1.0), dict(noise_level=-0.1)])
    def test_invalid_spec(self, bad):
        with pytest.raises(ValueError):
            DegradeSpec(**bad)

    def test_indivisible(self):
        with pytest.raises(ValueError):
            degrade(Image(np.zeros((1, 64, 64))), DegradeSpec(scale=3))
