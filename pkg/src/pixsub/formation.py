"""Hard enforcement of the formation constraint by pixel substitution."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from pixsub.degrade import DegradeSpec, check_scale, degrade, zero_upsample_planes
from pixsub.image import Image
from pixsub.metrics import mse_to_psnr


@dataclass(frozen=True)
class SubstitutionRecord:
    substituted_count: int
    expected_count: int
    max_injected_delta: float


@dataclass(frozen=True)
class ResidualReport:
    """Agreement between an observation and the LR image regenerated from an SR output.

    ``mse`` is on the [0, 1] scale; ``mse_8bit`` is the same quantity on the
    [0, 255] scale, which is how regenerated-LR tables are usually printed.
    """

    mse: float
    psnr: float
    max_abs: float
    quantized: bool

    @property
    def mse_8bit(self) -> float:
        return self.mse * 255.0**2

    def as_dict(self) -> dict:
        return {
            "mse": self.mse,
            "mse_8bit": self.mse_8bit,
            "psnr": self.psnr,
            "max_abs": self.max_abs,
            "quantized": self.quantized,
        }


def zero_upsample(lr: Image, s: int) -> Image:
    """Place LR samples at the un-decimated positions of an s-times larger zero grid."""
    s = check_scale(s)
    return Image(zero_upsample_planes(lr.data, s))


def undecimated_mask(height: int, width: int, s: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    mask[::s, ::s] = True
    return mask


def pixel_substitute(blurred_hr: Image, lr: Image, s: int) -> tuple[Image, SubstitutionRecord]:
    """Overwrite the blurred HR image with LR values at un-decimated positions.

    Values are copied verbatim, so decimating the result returns ``lr``
    bit for bit.
    """
    s = check_scale(s)
    if blurred_hr.channels != lr.channels:
        raise ValueError(f"channel mismatch: {blurred_hr.channels} vs {lr.channels}")
    if (blurred_hr.height, blurred_hr.width) != (lr.height * s, lr.width * s):
        raise ValueError(
            f"blurred image {blurred_hr.width}x{blurred_hr.height} is not "
            f"{s}x the LR size {lr.width}x{lr.height}"
        )
    out = np.array(blurred_hr.data)
    sites = out[:, ::s, ::s]
    delta = float(np.max(np.abs(sites - lr.data)))
    out[:, ::s, ::s] = lr.data
    record = SubstitutionRecord(
        substituted_count=int(lr.data.size),
        expected_count=lr.width * lr.height * lr.channels,
        max_injected_delta=delta,
    )
    return Image(out), record


def constraint_residual(sr: Image, lr: Image, spec: DegradeSpec, quantize: bool = False) -> ResidualReport:
    """Regenerate the LR image from ``sr`` (noise-free) and compare it with ``lr``.

    With ``quantize`` both LR images are rounded to the 8-bit grid first.
    """
    s = spec.scale
    if (sr.height, sr.width) != (lr.height * s, lr.width * s) or sr.channels != lr.channels:
        raise ValueError(
            f"SR image {sr.shape} inconsistent with LR {lr.shape} at scale {s}"
        )
    regen = degrade(sr, spec.noiseless()).data
    obs = lr.data
    if quantize:
        regen = np.round(np.clip(regen, 0, 1) * 255.0) / 255.0
        obs = np.round(np.clip(obs, 0, 1) * 255.0) / 255.0
    diff = regen - obs
    mse = float(np.mean(diff * diff))
    return ResidualReport(
        mse=mse, psnr=mse_to_psnr(mse), max_abs=float(np.max(np.abs(diff))), quantized=quantize
    )
