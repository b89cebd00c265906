"""Planar float images and lossless 8-bit file I/O.

Images are stored channel-major as ``(channels, height, width)`` float64
arrays with nominal range [0, 1].  Values outside that range are allowed
while computing; they are clamped only when written to disk.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from PIL import UnidentifiedImageError

SUPPORTED_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


class ImageIOError(Exception):
    """Base class for image read/write failures."""


class ImageReadError(ImageIOError):
    """The file is missing or cannot be opened."""


class ImageFormatError(ImageIOError):
    """The file is not a decodable PNG/PPM/PGM (e.g. truncated)."""


class UnsupportedImageError(ImageIOError):
    """The file decodes but uses a bit depth or layout we do not handle."""


class ImageWriteError(ImageIOError):
    """The destination cannot be written."""


@dataclass(frozen=True, eq=False)
class Image:
    """Immutable planar image.

    ``data`` has shape ``(channels, height, width)``; channels is 1 or 3.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValueError(f"expected (C, H, W) with C in {{1, 3}}, got shape {arr.shape}")
        if arr.shape[1] < 1 or arr.shape[2] < 1:
            raise ValueError(f"empty image of shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite samples")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def to_hwc(self) -> np.ndarray:
        """Interleaved ``(H, W, C)`` copy, handy for plotting."""
        return np.ascontiguousarray(np.moveaxis(self.data, 0, -1))

    def clamped(self) -> "Image":
        return Image(np.clip(self.data, 0.0, 1.0))

    def __repr__(self):
        return f"Image(channels={self.channels}, height={self.height}, width={self.width})"


def load_image(path) -> Image:
    """Read an 8-bit PNG or binary PGM/PPM, scaling bytes by 1/255."""
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise ImageReadError(f"cannot open {path}: {exc}") from exc
    with fh:
        try:
            pil = PILImage.open(fh)
            pil.load()
        except (UnidentifiedImageError, SyntaxError, ValueError) as exc:
            raise ImageFormatError(f"{path}: not a readable image ({exc})") from exc
        except OSError as exc:
            # Pillow reports truncated/corrupt streams as OSError
            raise ImageFormatError(f"{path}: corrupt or truncated image ({exc})") from exc

        if pil.format not in ("PNG", "PPM"):
            raise UnsupportedImageError(f"{path}: unsupported container {pil.format!r}")
        mode = pil.mode
        if mode == "P":
            if "transparency" in pil.info:
                raise UnsupportedImageError(f"{path}: palette image with transparency")
            pil = pil.convert("RGB")
            mode = "RGB"
        if mode not in ("L", "RGB"):
            raise UnsupportedImageError(f"{path}: unsupported pixel mode {mode!r} (need 8-bit gray or RGB)")
        arr = np.asarray(pil, dtype=np.uint8)

    if arr.ndim == 2:
        planar = arr[None]
    else:
        planar = np.moveaxis(arr, -1, 0)
    return Image(planar.astype(np.float64) / 255.0)


def quantize(img: Image) -> np.ndarray:
    """Clamp to [0, 1] and round to bytes, as done on store."""
    return np.round(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_image(img: Image, path) -> None:
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in SUPPORTED_SUFFIXES:
        raise ImageWriteError(f"{path}: unsupported output suffix {suffix!r}")
    q = quantize(img)
    if img.channels == 1:
        pil = PILImage.fromarray(q[0], mode="L")
    else:
        pil = PILImage.fromarray(np.ascontiguousarray(np.moveaxis(q, 0, -1)), mode="RGB")
    fmt = "PNG" if suffix == ".png" else "PPM"
    try:
        pil.save(path, format=fmt)
    except OSError as exc:
        raise ImageWriteError(f"cannot write {path}: {exc}") from exc


def to_luma(img: Image) -> Image:
    """BT.601 luma on [0, 1] input, offset to the studio range [16, 235]/255.

    Gray images pass through unchanged.
    """
    if img.channels == 1:
        return img
    r, g, b = img.data
    y = (65.481 * r + 128.553 * g + 24.966 * b + 16.0) / 255.0
    return Image(y[None])
