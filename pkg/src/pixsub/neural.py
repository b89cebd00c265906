"""A small EDSR-style refiner with hand-written reverse-mode gradients.

Tensors are plain float64 numpy arrays laid out ``(batch, channels, H, W)``.
Every layer has a forward function and a matching backward function that
maps the upstream gradient to gradients of its inputs and parameters.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from pixsub.degrade import (
    DegradeSpec,
    blur_decimate_adjoint_planes,
    blur_decimate_planes,
    reflect_fold_matrix,
    reflect_index,
)

RES_SCALE = 0.1
WEIGHTS_MAGIC = b"PXSBW1"


class WeightFileError(Exception):
    """Malformed or incompatible weight file."""


# ---------------------------------------------------------------------------
# layers


def _pad1(x):
    h, w = x.shape[-2:]
    iy = reflect_index(h, 1)
    ix = reflect_index(w, 1)
    return x[..., iy[:, None], ix[None, :]]


def _check_conv(x, w, b=None):
    if x.ndim != 4:
        raise ValueError(f"expected a (B, C, H, W) tensor, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ValueError(f"expected (out, in, 3, 3) weights, got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"input has {x.shape[1]} channels, weights expect {w.shape[1]}")
    if b is not None and b.shape != (w.shape[0],):
        raise ValueError(f"bias shape {b.shape} does not match {w.shape[0]} outputs")


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """3x3 cross-correlation, stride 1, reflect padding 1, plus bias."""
    _check_conv(x, w, b)
    cols = sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))  # B, C, H, W, 3, 3
    y = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))  # B, H, W, O
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2)) + b[None, :, None, None]


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Gradients ``(grad_x, grad_w, grad_b)`` of :func:`conv2d_forward`."""
    _check_conv(x, w)
    bsz, _, h, wd = x.shape
    if grad_out.shape != (bsz, w.shape[0], h, wd):
        raise ValueError(f"upstream gradient shape {grad_out.shape} does not match output")
    cols = sliding_window_view(_pad1(x), (3, 3), axis=(2, 3))
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_w = np.tensordot(grad_out, cols, axes=([0, 2, 3], [0, 2, 3]))
    gcols = np.tensordot(grad_out, w, axes=([1], [0]))  # B, H, W, C, 3, 3
    gpad = np.zeros((bsz, x.shape[1], h + 2, wd + 2))
    for i in range(3):
        for j in range(3):
            gpad[:, :, i:i + h, j:j + wd] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    grad_x = reflect_fold_matrix(h, 1) @ gpad @ reflect_fold_matrix(wd, 1).T
    return grad_x, grad_w, grad_b


def relu(x):
    return np.maximum(x, 0.0)


def relu_backward(x, grad_out):
    return grad_out * (x > 0)


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """``(B, C*r*r, H, W) -> (B, C, H*r, W*r)``; channel ``c*r*r + dy*r + dx`` lands at offset (dy, dx)."""
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by r^2 = {r * r}")
    oc = c // (r * r)
    return x.reshape(b, oc, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(b, oc, h * r, w * r)


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial size {h}x{w} not divisible by {r}")
    return x.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(
        b, c * r * r, h // r, w // r
    )


# pixel shuffle is a permutation, so its adjoint is its inverse
pixel_shuffle_backward = pixel_unshuffle


# ---------------------------------------------------------------------------
# losses


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its subgradient (sign(0) = 0)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    d = pred - target
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


def formation_loss(pred_hr: np.ndarray, lr: np.ndarray, spec: DegradeSpec, lam: float):
    """``lam * mean|D K pred_hr - lr|`` and its gradient w.r.t. ``pred_hr``."""
    s = spec.scale
    if pred_hr.shape[:-2] != lr.shape[:-2] or pred_hr.shape[-2:] != (lr.shape[-2] * s, lr.shape[-1] * s):
        raise ValueError(f"HR shape {pred_hr.shape} inconsistent with LR {lr.shape} at scale {s}")
    if lam == 0:
        return 0.0, np.zeros_like(pred_hr)
    k = spec.blur_kernel()
    r = blur_decimate_planes(pred_hr, k, s) - lr
    loss = lam * float(np.mean(np.abs(r)))
    grad = blur_decimate_adjoint_planes(lam * np.sign(r) / r.size, k, s)
    return loss, grad


# ---------------------------------------------------------------------------
# network


def _glorot(rng, out_c, in_c):
    limit = np.sqrt(6.0 / (in_c * 9 + out_c * 9))
    return rng.uniform(-limit, limit, size=(out_c, in_c, 3, 3))


class ToyNet:
    """head conv -> residual blocks -> tail conv (+ long skip) -> [upsampler] -> out conv.

    Each residual block is ``x + 0.1 * conv(relu(conv(x)))``.  Networks
    without an upsampler consume HR-sized input and add it back to their
    output, so a freshly initialised later stage starts as the identity.
    """

    def __init__(self, params: dict, scale: int, has_upsampler: bool):
        self.params = params
        self.scale = scale
        self.has_upsampler = has_upsampler
        self.features = params["head.w"].shape[0]
        self.channels = params["head.w"].shape[1]
        self.blocks = sum(1 for name in params if name.endswith(".conv1.w"))
        self._validate()

    @classmethod
    def create(cls, channels=3, features=16, blocks=2, scale=2, has_upsampler=True, seed=0):
        rng = np.random.default_rng(seed)
        p = {}

        def conv(name, out_c, in_c):
            p[name + ".w"] = _glorot(rng, out_c, in_c)
            p[name + ".b"] = np.zeros(out_c)

        conv("head", features, channels)
        for i in range(blocks):
            conv(f"block{i}.conv1", features, features)
            conv(f"block{i}.conv2", features, features)
        conv("tail", features, features)
        if has_upsampler:
            conv("up", features * scale * scale, features)
        p["out.w"] = np.zeros((channels, features, 3, 3))
        p["out.b"] = np.zeros(channels)
        return cls(p, scale, has_upsampler)

    @classmethod
    def from_params(cls, params: dict) -> "ToyNet":
        """Rebuild a network from loaded tensors, inferring its shape."""
        try:
            feats = params["head.w"].shape[0]
            has_up = "up.w" in params
            scale = int(round(np.sqrt(params["up.w"].shape[0] / feats))) if has_up else 1
            return cls(params, scale, has_up)
        except (KeyError, IndexError, ValueError) as exc:
            raise WeightFileError(f"weights do not describe a ToyNet: {exc}") from exc

    def _validate(self):
        f, c = self.features, self.channels
        expected = {"head.w": (f, c, 3, 3), "head.b": (f,), "tail.w": (f, f, 3, 3), "tail.b": (f,),
                    "out.w": (c, f, 3, 3), "out.b": (c,)}
        for i in range(self.blocks):
            for conv in ("conv1", "conv2"):
                expected[f"block{i}.{conv}.w"] = (f, f, 3, 3)
                expected[f"block{i}.{conv}.b"] = (f,)
        if self.has_upsampler:
            r2 = self.scale * self.scale
            expected["up.w"] = (f * r2, f, 3, 3)
            expected["up.b"] = (f * r2,)
        if set(expected) != set(self.params):
            raise WeightFileError(
                f"unexpected tensor set: missing {sorted(set(expected) - set(self.params))}, "
                f"extra {sorted(set(self.params) - set(expected))}"
            )
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise WeightFileError(f"{name} has shape {self.params[name].shape}, expected {shape}")

    def copy(self) -> "ToyNet":
        return ToyNet({k: v.copy() for k, v in self.params.items()}, self.scale, self.has_upsampler)

    def _conv(self, name, x):
        return conv2d_forward(x, self.params[name + ".w"], self.params[name + ".b"])

    def forward(self, x: np.ndarray, keep: bool = False):
        """Run the network; with ``keep`` also return the cache needed by :meth:`backward`."""
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W) input, got {x.shape}")
        cache = {"x": x}
        h0 = self._conv("head", x)
        cache["h0"] = h0
        h = h0
        for i in range(self.blocks):
            a = self._conv(f"block{i}.conv1", h)
            c = self._conv(f"block{i}.conv2", relu(a))
            cache[f"block{i}"] = (h, a)
            h = h + RES_SCALE * c
        cache["body_out"] = h
        t = self._conv("tail", h) + h0
        cache["t"] = t
        if self.has_upsampler:
            u = self._conv("up", t)
            cache["u"] = u
            t = pixel_shuffle(u, self.scale)
            cache["shuffled"] = t
        y = self._conv("out", t)
        if not self.has_upsampler:
            y = y + x
        return (y, cache) if keep else y

    def backward(self, cache: dict, grad_y: np.ndarray):
        """Return ``(grad_params, grad_input)`` for upstream gradient ``grad_y``."""
        p = self.params
        g = {}
        last = cache["shuffled"] if self.has_upsampler else cache["t"]
        gt, g["out.w"], g["out.b"] = conv2d_backward(last, p["out.w"], grad_y)
        if self.has_upsampler:
            gu = pixel_shuffle_backward(gt, self.scale)
            gt, g["up.w"], g["up.b"] = conv2d_backward(cache["t"], p["up.w"], gu)
        gh, g["tail.w"], g["tail.b"] = conv2d_backward(cache["body_out"], p["tail.w"], gt)
        gh0 = gt.copy()  # long skip
        for i in reversed(range(self.blocks)):
            h_in, a = cache[f"block{i}"]
            gc = RES_SCALE * gh
            gr, g[f"block{i}.conv2.w"], g[f"block{i}.conv2.b"] = conv2d_backward(
                relu(a), p[f"block{i}.conv2.w"], gc
            )
            ga = relu_backward(a, gr)
            gin, g[f"block{i}.conv1.w"], g[f"block{i}.conv1.b"] = conv2d_backward(
                h_in, p[f"block{i}.conv1.w"], ga
            )
            gh = gh + gin
        gh0 = gh0 + gh
        gx, g["head.w"], g["head.b"] = conv2d_backward(cache["x"], p["head.w"], gh0)
        if not self.has_upsampler:
            gx = gx + grad_y
        return g, gx


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for name in sorted(params):
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        params[name] -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# weight files


def save_weights(params: dict, path) -> None:
    """Write tensors as ``PXSBW1`` followed by (name, shape, float64 payload) records."""
    parts = [WEIGHTS_MAGIC]
    for name in sorted(params):
        arr = np.asarray(params[name], dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_weights(path) -> dict:
    buf = Path(path).read_bytes()
    if not buf.startswith(WEIGHTS_MAGIC):
        raise WeightFileError(f"{path}: missing {WEIGHTS_MAGIC.decode()} header")
    pos = len(WEIGHTS_MAGIC)
    out = {}

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise WeightFileError(f"{path}: truncated record")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    while pos < len(buf):
        (name_len,) = struct.unpack("<Q", take(8))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<Q", take(8))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(dims)
    return out
