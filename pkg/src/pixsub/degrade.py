"""Image formation: blur, decimation, bicubic resizing and noise.

The array-level helpers (``*_planes``) act on the last two axes of an
array of any rank so the refiners and the network losses can reuse the
exact same operators on batched tensors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from pixsub.image import Image

VALID_SCALES = (1, 2, 3, 4)
MAX_NOISE = 0.1


def check_scale(s) -> int:
    if isinstance(s, bool) or int(s) != s or int(s) not in VALID_SCALES:
        raise ValueError(f"scale must be one of {VALID_SCALES}, got {s!r}")
    return int(s)


@dataclass(frozen=True, eq=False)
class Kernel:
    """Odd-sized, normalized 2-D stencil."""

    taps: np.ndarray

    def __post_init__(self):
        t = np.array(self.taps, dtype=np.float64, copy=True)
        if t.ndim != 2 or t.shape[0] != t.shape[1]:
            raise ValueError(f"kernel must be square, got shape {t.shape}")
        if t.shape[0] % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {t.shape[0]}")
        if not np.all(np.isfinite(t)):
            raise ValueError("kernel has non-finite taps")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ValueError(f"kernel taps sum to {t.sum()!r}, expected 1")
        t.flags.writeable = False
        object.__setattr__(self, "taps", t)

    @property
    def size(self) -> int:
        return self.taps.shape[0]

    @classmethod
    def identity(cls, size: int = 1) -> "Kernel":
        t = np.zeros((size, size))
        t[size // 2, size // 2] = 1.0
        return cls(t)


def default_sigma(s: int) -> float:
    return 0.5 * s


def default_kernel_size(sigma: float) -> int:
    return 2 * math.ceil(3.0 * sigma) + 1


def gaussian_kernel(sigma: float, size: Optional[int] = None) -> Kernel:
    if not sigma > 0:
        raise ValueError(f"sigma must be positive, got {sigma!r}")
    if size is None:
        size = default_kernel_size(sigma)
    if size < 3 or size % 2 == 0:
        raise ValueError(f"kernel size must be odd and >= 3, got {size}")
    c = (size - 1) / 2.0
    r = np.arange(size) - c
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma**2))
    g /= g.sum()
    # one more pass pins the sum to 1 within a few ulps
    return Kernel(g / g.sum())


@dataclass(frozen=True)
class DegradeSpec:
    """How an LR observation is produced from an HR image.

    ``mode`` is ``"gaussian"`` (blur then keep every s-th sample) or
    ``"bicubic"`` (antialiased bicubic downscale).  ``sigma`` and
    ``kernel_size`` default to ``0.5 * scale`` and ``2 * ceil(3 sigma) + 1``.
    In bicubic mode the same Gaussian serves as the blur used for pixel
    substitution.  ``kernel`` overrides the Gaussian entirely.
    """

    mode: str = "gaussian"
    scale: int = 2
    sigma: Optional[float] = None
    kernel_size: Optional[int] = None
    noise_level: float = 0.0
    kernel: Optional[Kernel] = None

    def __post_init__(self):
        if self.mode not in ("gaussian", "bicubic"):
            raise ValueError(f"unknown degradation mode {self.mode!r}")
        object.__setattr__(self, "scale", check_scale(self.scale))
        if self.sigma is not None and not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma!r}")
        if not 0.0 <= self.noise_level <= MAX_NOISE:
            raise ValueError(f"noise_level must lie in [0, {MAX_NOISE}], got {self.noise_level!r}")

    @property
    def blur_sigma(self) -> float:
        return self.sigma if self.sigma is not None else default_sigma(self.scale)

    def blur_kernel(self) -> Kernel:
        """The stencil k of the formation model (or its bicubic-mode surrogate)."""
        if self.kernel is not None:
            return self.kernel
        return gaussian_kernel(self.blur_sigma, self.kernel_size)

    def noiseless(self) -> "DegradeSpec":
        return replace(self, noise_level=0.0)


# ---------------------------------------------------------------------------
# array-level operators


def reflect_index(n: int, pad: int) -> np.ndarray:
    """Source index for every position of a reflect-padded axis (edge not repeated)."""
    return np.pad(np.arange(n), pad, mode="reflect")


def reflect_fold_matrix(n: int, pad: int) -> np.ndarray:
    # adjoint of reflect padding: padded position j feeds source idx[j]
    idx = reflect_index(n, pad)
    P = np.zeros((n, n + 2 * pad))
    P[idx, np.arange(idx.size)] = 1.0
    return P


def _check_kernel_fits(shape, k: Kernel):
    h, w = shape[-2], shape[-1]
    if k.size > 2 * min(h, w) + 1:
        raise ValueError(f"kernel of size {k.size} too large for {h}x{w} image")


def convolve_planes(arr: np.ndarray, k: Kernel) -> np.ndarray:
    """Convolve every trailing 2-D plane of ``arr`` with ``k`` (reflect boundary)."""
    _check_kernel_fits(arr.shape, k)
    h, w = arr.shape[-2:]
    p = k.size // 2
    iy = reflect_index(h, p)
    ix = reflect_index(w, p)
    padded = arr[..., iy[:, None], ix[None, :]]
    flipped = k.taps[::-1, ::-1]
    out = np.zeros(arr.shape, dtype=np.float64)
    for a in range(k.size):
        for b in range(k.size):
            wgt = flipped[a, b]
            if wgt != 0.0:
                out += wgt * padded[..., a:a + h, b:b + w]
    return out


def convolve_planes_adjoint(grad: np.ndarray, k: Kernel) -> np.ndarray:
    """Exact transpose of :func:`convolve_planes`, including the boundary fold."""
    _check_kernel_fits(grad.shape, k)
    h, w = grad.shape[-2:]
    p = k.size // 2
    flipped = k.taps[::-1, ::-1]
    gp = np.zeros(grad.shape[:-2] + (h + 2 * p, w + 2 * p))
    for a in range(k.size):
        for b in range(k.size):
            wgt = flipped[a, b]
            if wgt != 0.0:
                gp[..., a:a + h, b:b + w] += wgt * grad
    return reflect_fold_matrix(h, p) @ gp @ reflect_fold_matrix(w, p).T


def decimate_planes(arr: np.ndarray, s: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    if h % s or w % s:
        raise ValueError(f"{h}x{w} is not divisible by scale {s}")
    return arr[..., ::s, ::s].copy()


def zero_upsample_planes(arr: np.ndarray, s: int) -> np.ndarray:
    h, w = arr.shape[-2:]
    out = np.zeros(arr.shape[:-2] + (h * s, w * s))
    out[..., ::s, ::s] = arr
    return out


def blur_decimate_planes(arr: np.ndarray, k: Kernel, s: int) -> np.ndarray:
    """The linear formation operator D K."""
    return decimate_planes(convolve_planes(arr, k), s)


def blur_decimate_adjoint_planes(res: np.ndarray, k: Kernel, s: int) -> np.ndarray:
    """K^T D^T applied to an LR-sized array."""
    return convolve_planes_adjoint(zero_upsample_planes(res, s), k)


# ---------------------------------------------------------------------------
# bicubic


def cubic(x, a: float = -0.5):
    x = np.abs(x)
    x2 = x * x
    x3 = x2 * x
    return np.where(
        x <= 1.0,
        (a + 2.0) * x3 - (a + 3.0) * x2 + 1.0,
        np.where(x < 2.0, a * x3 - 5.0 * a * x2 + 8.0 * a * x - 4.0 * a, 0.0),
    )


def bicubic_weights(in_n: int, out_n: int) -> np.ndarray:
    """Resampling matrix of shape ``(out_n, in_n)`` for one axis.

    Pixel-center aligned; when shrinking, the kernel is stretched by the
    inverse scale (antialiasing).  Out-of-range taps are clamped to the edge.
    """
    scale = out_n / in_n
    shrink = scale < 1.0
    width = 4.0 / scale if shrink else 4.0
    n_taps = int(math.ceil(width)) + 2
    W = np.zeros((out_n, in_n))
    for i in range(out_n):
        center = (i + 0.5) / scale - 0.5
        left = math.floor(center - width / 2.0)
        js = left + np.arange(n_taps)
        dist = center - js
        wts = scale * cubic(scale * dist) if shrink else cubic(dist)
        wts = wts / wts.sum()
        np.add.at(W[i], np.clip(js, 0, in_n - 1), wts)
    return W


def bicubic_resize(img: Image, out_w: int, out_h: int) -> Image:
    if out_w < 1 or out_h < 1:
        raise ValueError(f"output size must be positive, got {out_w}x{out_h}")
    Wy = bicubic_weights(img.height, out_h)
    Wx = bicubic_weights(img.width, out_w)
    return Image(Wy @ img.data @ Wx.T)


# ---------------------------------------------------------------------------
# image-level API


def convolve(img: Image, k: Kernel) -> Image:
    return Image(convolve_planes(img.data, k))


def decimate(img: Image, s: int) -> Image:
    s = check_scale(s)
    return Image(decimate_planes(img.data, s))


def add_noise(img: Image, level: float, seed: int) -> Image:
    """Add i.i.d. Gaussian noise with std ``level`` (fraction of full range) and clamp."""
    if level < 0:
        raise ValueError(f"noise level must be non-negative, got {level!r}")
    if level > MAX_NOISE:
        raise ValueError(f"noise level above {MAX_NOISE}: {level!r}")
    if level == 0:
        return img
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, level, size=img.shape)
    return Image(np.clip(img.data + noise, 0.0, 1.0))


def degrade(img: Image, spec: DegradeSpec, seed: int = 0) -> Image:
    """Produce the LR observation of ``img`` under ``spec``."""
    s = spec.scale
    if img.height % s or img.width % s:
        raise ValueError(f"HR size {img.width}x{img.height} not divisible by scale {s}")
    if spec.mode == "gaussian":
        lr = Image(blur_decimate_planes(img.data, spec.blur_kernel(), s))
    else:
        lr = bicubic_resize(img, img.width // s, img.height // s)
    return add_noise(lr, spec.noise_level, seed)
