"""Classical (non-learned) refiners that can fill any cascade stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from pixsub.degrade import (
    DegradeSpec,
    bicubic_resize,
    blur_decimate_adjoint_planes,
    blur_decimate_planes,
    check_scale,
)
from pixsub.image import Image

REFINER_KINDS = ("bicubic", "ibp", "gradprior", "toynet")
CHARBONNIER_EPS = 1e-3
DIVERGENCE_PATIENCE = 3


@dataclass(frozen=True)
class RefinerSpec:
    """What runs inside one cascade stage.

    ``iters``/``step`` drive ibp and gradprior, ``lambda_prior`` weights the
    gradient prior, ``weights_path``/``features``/``blocks`` describe a toynet.
    """

    kind: str = "bicubic"
    iters: int = 20
    step: float = 1.0
    lambda_prior: float = 0.01
    weights_path: Optional[str] = None
    features: int = 16
    blocks: int = 2

    def __post_init__(self):
        if self.kind not in REFINER_KINDS:
            raise ValueError(f"unknown refiner kind {self.kind!r}; expected one of {REFINER_KINDS}")
        if self.iters < 1:
            raise ValueError(f"iters must be >= 1, got {self.iters}")
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        if self.lambda_prior < 0:
            raise ValueError(f"lambda_prior must be >= 0, got {self.lambda_prior}")
        if self.features < 1 or self.blocks < 0:
            raise ValueError("toynet needs features >= 1 and blocks >= 0")


@dataclass
class IterationTrace:
    """Per-iteration record filled in by the iterative refiners.

    ``values[0]`` is the monitored quantity at the initial estimate.
    """

    values: list = field(default_factory=list)
    diverged: bool = False
    best_iter: int = 0


class DivergenceError(RuntimeError):
    """Raised by callers that treat a tripped divergence guard as fatal."""


def refine_bicubic(img: Image, target_scale: int) -> Image:
    """Upscale by ``target_scale`` with bicubic interpolation (identity at 1)."""
    s = check_scale(target_scale)
    if s == 1:
        return img
    return bicubic_resize(img, img.width * s, img.height * s)


def _check_init(lr: Image, init: Image, s: int):
    if init.channels != lr.channels or (init.height, init.width) != (lr.height * s, lr.width * s):
        raise ValueError(f"init {init.shape} is not HR-sized for LR {lr.shape} at scale {s}")


def data_residual(img: Image, lr: Image, spec: DegradeSpec) -> float:
    """Euclidean norm of ``D K img - lr``."""
    r = blur_decimate_planes(img.data, spec.blur_kernel(), spec.scale) - lr.data
    return float(np.sqrt(np.sum(r * r)))


def _descend(x0, value, update, iters, trace):
    # Shared loop with the divergence guard: stop after the monitored value
    # rises DIVERGENCE_PATIENCE times in a row and hand back the best iterate.
    x = x0
    v = value(x)
    best_x, best_v, best_i = x, v, 0
    values = [v]
    rises = 0
    diverged = False
    for i in range(1, iters + 1):
        x = update(x)
        v_new = value(x)
        values.append(v_new)
        rises = rises + 1 if v_new > v else 0
        v = v_new
        if v < best_v:
            best_x, best_v, best_i = x, v, i
        if rises >= DIVERGENCE_PATIENCE or not math.isfinite(v):
            diverged = True
            break
    if trace is not None:
        trace.values = values
        trace.diverged = diverged
        trace.best_iter = best_i if diverged else len(values) - 1
    return best_x if diverged else x


def refine_ibp(
    lr: Image,
    init: Image,
    spec: DegradeSpec,
    iters: int = 20,
    step: float = 1.0,
    trace: Optional[IterationTrace] = None,
) -> Image:
    """Iterative back-projection: ``I += step * K^T D^T (lr - D K I)``.

    The back-projection filter is the exact transpose of the forward
    operator built from ``spec.blur_kernel()``.  ``trace`` (optional) receives
    the data residual after every iteration.
    """
    s = spec.scale
    _check_init(lr, init, s)
    k = spec.blur_kernel()
    obs = lr.data

    def value(x):
        r = obs - blur_decimate_planes(x, k, s)
        return float(np.sqrt(np.sum(r * r)))

    def update(x):
        r = obs - blur_decimate_planes(x, k, s)
        return x + step * blur_decimate_adjoint_planes(r, k, s)

    return Image(_descend(init.data, value, update, iters, trace))


def _forward_diffs(x):
    return x[..., :, 1:] - x[..., :, :-1], x[..., 1:, :] - x[..., :-1, :]


def _forward_diffs_adjoint(gx, gy, shape):
    out = np.zeros(shape)
    out[..., :, 1:] += gx
    out[..., :, :-1] -= gx
    out[..., 1:, :] += gy
    out[..., :-1, :] -= gy
    return out


def gradprior_objective(x: np.ndarray, lr: Image, spec: DegradeSpec, lambda_prior: float) -> float:
    """``||D K x - lr||^2 + lambda * sum(sqrt(grad^2 + eps^2))`` over forward differences."""
    r = blur_decimate_planes(x, spec.blur_kernel(), spec.scale) - lr.data
    dx, dy = _forward_diffs(x)
    e2 = CHARBONNIER_EPS**2
    prior = np.sum(np.sqrt(dx * dx + e2)) + np.sum(np.sqrt(dy * dy + e2))
    return float(np.sum(r * r) + lambda_prior * prior)


def gradprior_gradient(x: np.ndarray, lr: Image, spec: DegradeSpec, lambda_prior: float) -> np.ndarray:
    k = spec.blur_kernel()
    s = spec.scale
    r = blur_decimate_planes(x, k, s) - lr.data
    g = 2.0 * blur_decimate_adjoint_planes(r, k, s)
    if lambda_prior:
        dx, dy = _forward_diffs(x)
        e2 = CHARBONNIER_EPS**2
        g = g + lambda_prior * _forward_diffs_adjoint(
            dx / np.sqrt(dx * dx + e2), dy / np.sqrt(dy * dy + e2), x.shape
        )
    return g


def refine_gradprior(
    lr: Image,
    init: Image,
    spec: DegradeSpec,
    iters: int = 20,
    step: float = 0.5,
    lambda_prior: float = 0.01,
    trace: Optional[IterationTrace] = None,
) -> Image:
    """Gradient descent on the data term plus a Charbonnier gradient-sparsity prior.

    Because the data term is squared without a 1/2, a step of ``h`` here
    moves exactly like :func:`refine_ibp` with step ``2h`` when the prior
    weight is zero.
    """
    s = spec.scale
    _check_init(lr, init, s)

    return Image(_descend(
        init.data,
        lambda x: gradprior_objective(x, lr, spec, lambda_prior),
        lambda x: x - step * gradprior_gradient(x, lr, spec, lambda_prior),
        iters,
        trace,
    ))
