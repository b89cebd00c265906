"""Brute-force reference implementations used only by the tests.

Nothing here imports the package's operators; each routine is a direct
scalar transcription of the defining formula.
"""

import math

import numpy as np


def reflect(i, n):
    """Mirror an out-of-range index without repeating the edge sample."""
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


def conv_matrix(h, w, taps):
    """Explicit (h*w, h*w) matrix of 2-D convolution with reflect boundary."""
    size = taps.shape[0]
    c = size // 2
    K = np.zeros((h * w, h * w))
    for y in range(h):
        for x in range(w):
            row = y * w + x
            for a in range(size):
                for b in range(size):
                    sy = reflect(y + c - a, h)
                    sx = reflect(x + c - b, w)
                    K[row, sy * w + sx] += taps[a, b]
    return K


def decimation_matrix(h, w, s):
    """Selection matrix keeping pixels (i*s, j*s) of an h x w image."""
    lh, lw = h // s, w // s
    D = np.zeros((lh * lw, h * w))
    for i in range(lh):
        for j in range(lw):
            D[i * lw + j, (i * s) * w + (j * s)] = 1.0
    return D


def direct_convolve(plane, taps):
    h, w = plane.shape
    size = taps.shape[0]
    c = size // 2
    out = np.zeros_like(plane, dtype=float)
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for a in range(size):
                for b in range(size):
                    acc += taps[a, b] * plane[reflect(y + c - a, h), reflect(x + c - b, w)]
            out[y, x] = acc
    return out


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t**3 - (a + 3) * t**2 + 1
    if t < 2:
        return a * t**3 - 5 * a * t**2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_axis_weights(in_n, out_n, i):
    """{source index: weight} for output sample i along one axis."""
    ratio = out_n / in_n
    stretch = min(ratio, 1.0)
    u = (i + 0.5) / ratio - 0.5
    half = 2.0 / stretch
    weights = {}
    total = 0.0
    for j in range(int(math.floor(u - half)) - 1, int(math.ceil(u + half)) + 2):
        wt = stretch * keys_cubic(stretch * (u - j))
        if wt == 0.0:
            continue
        src = min(max(j, 0), in_n - 1)
        weights[src] = weights.get(src, 0.0) + wt
        total += wt
    return {k: v / total for k, v in weights.items()}


def bicubic_resize_plane(plane, out_h, out_w):
    in_h, in_w = plane.shape
    out = np.zeros((out_h, out_w))
    for y in range(out_h):
        wy = bicubic_axis_weights(in_h, out_h, y)
        for x in range(out_w):
            wx = bicubic_axis_weights(in_w, out_w, x)
            acc = 0.0
            for sy, a in wy.items():
                for sx, b in wx.items():
                    acc += a * b * plane[sy, sx]
            out[y, x] = acc
    return out


def scalar_mse(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    total = 0.0
    for u, v in zip(a, b):
        total += (float(u) - float(v)) ** 2
    return total / a.size


def scalar_psnr(a, b):
    m = scalar_mse(a, b)
    return math.inf if m == 0 else 10.0 * math.log10(1.0 / m)


def ssim_windowed(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM computed window by window with an explicit 2-D Gaussian."""
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    c1, c2 = k1**2, k2**2
    h, w = a.shape
    vals = []
    for y in range(h - size + 1):
        for x in range(w - size + 1):
            pa = a[y:y + size, x:x + size]
            pb = b[y:y + size, x:x + size]
            ma = float(np.sum(g * pa))
            mb = float(np.sum(g * pb))
            va = float(np.sum(g * (pa - ma) ** 2))
            vb = float(np.sum(g * (pb - mb) ** 2))
            cov = float(np.sum(g * (pa - ma) * (pb - mb)))
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def conv2d_loops(x, w, b):
    """3x3 cross-correlation with reflect padding 1, written as loops."""
    bsz, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((bsz, cout, h, wd))
    for n in range(bsz):
        for o in range(cout):
            for y in range(h):
                for xx in range(wd):
                    acc = b[o]
                    for c in range(cin):
                        for i in range(3):
                            for j in range(3):
                                acc += w[o, c, i, j] * x[n, c, reflect(y + i - 1, h), reflect(xx + j - 1, wd)]
                    out[n, o, y, xx] = acc
    return out


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f`` w.r.t. every entry of array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def max_rel_err(a, b, floor=1e-6):
    """Largest element-wise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
