"""Full-reference quality metrics and the SR evaluation protocol."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pixsub.image import Image, to_luma

PROTOCOLS = ("y-channel-shaved", "rgb-full")

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricsReport:
    psnr: float
    ssim: float
    mse: float
    protocol: str

    def as_dict(self) -> dict:
        return asdict(self)


def _check_same(a: Image, b: Image):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def mse(a: Image, b: Image) -> float:
    _check_same(a, b)
    d = a.data - b.data
    return float(np.mean(d * d))


def mse_to_psnr(mse_value: float, peak: float = 1.0) -> float:
    """PSNR in dB; a zero error maps to ``math.inf``."""
    if mse_value == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse_value)


def psnr(a: Image, b: Image) -> float:
    return mse_to_psnr(mse(a, b))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    n = g.size
    x = sliding_window_view(x, n, axis=0) @ g
    return sliding_window_view(x, n, axis=1) @ g


def ssim_map(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> np.ndarray:
    """Local SSIM over every fully-contained 11x11 Gaussian window of two 2-D arrays."""
    g = gaussian_window_1d()
    if min(a.shape) < g.size:
        raise ValueError(f"image {a.shape} smaller than the {g.size}x{g.size} SSIM window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a * mu_a
    var_b = _filter_valid(b * b, g) - mu_b * mu_b
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a: Image, b: Image) -> float:
    """Mean SSIM; multi-channel inputs are averaged over channels."""
    _check_same(a, b)
    vals = [float(np.mean(ssim_map(a.data[c], b.data[c]))) for c in range(a.channels)]
    return float(np.mean(vals))


def shave(img: Image, border: int) -> Image:
    if border == 0:
        return img
    if img.height <= 2 * border or img.width <= 2 * border:
        raise ValueError(f"image {img.width}x{img.height} too small to shave {border} pixels")
    return Image(img.data[:, border:-border, border:-border])


def evaluate_sr(sr: Image, hr_gt: Image, s: int, protocol: str = "y-channel-shaved") -> MetricsReport:
    """PSNR/SSIM of an SR result against ground truth.

    The default protocol compares luma only after removing an ``s``-pixel
    border; ``rgb-full`` uses every channel and pixel.
    """
    _check_same(sr, hr_gt)
    if protocol == "y-channel-shaved":
        a = shave(to_luma(sr), s)
        b = shave(to_luma(hr_gt), s)
    elif protocol == "rgb-full":
        a, b = sr, hr_gt
    else:
        raise ValueError(f"unknown protocol {protocol!r}; expected one of {PROTOCOLS}")
    m = mse(a, b)
    return MetricsReport(psnr=mse_to_psnr(m), ssim=ssim(a, b), mse=m, protocol=protocol)
