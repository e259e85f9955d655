"""Slow, obviously-correct reference implementations used as test oracles.

Each one is written straight from its definition with explicit loops, so it
shares no code with the vectorised library it checks.
"""
import math

import numpy as np


def conv_oracle(x, w, b):
    """3x3 cross-correlation, stride 1, zero padding 1, by nested loops in float64."""
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout, h, wd))
    for bi in range(n):
        for o in range(cout):
            for i in range(h):
                for j in range(wd):
                    acc = float(b[o])
                    for c in range(cin):
                        for dy in range(3):
                            for dx in range(3):
                                y, xx = i + dy - 1, j + dx - 1
                                if 0 <= y < h and 0 <= xx < wd:
                                    acc += float(w[o, c, dy, dx]) * float(x[bi, c, y, xx])
                    out[bi, o, i, j] = acc
    return out


def bilinear_1d(values, scale=4):
    """Half-pixel bilinear resampling of one row, with clamped borders."""
    n = len(values)
    out = []
    for k in range(n * scale):
        s = (k + 0.5) / scale - 0.5
        s = min(max(s, 0.0), n - 1.0)
        i0 = int(math.floor(s))
        i1 = min(i0 + 1, n - 1)
        t = s - i0
        out.append((1 - t) * values[i0] + t * values[i1])
    return np.array(out)


def bilinear_oracle(x, scale=4):
    """Separable application of :func:`bilinear_1d` to every row then column."""
    n, c, h, w = x.shape
    rows = np.zeros((n, c, h, w * scale))
    for bi in range(n):
        for ch in range(c):
            for i in range(h):
                rows[bi, ch, i] = bilinear_1d(x[bi, ch, i].astype(np.float64), scale)
    out = np.zeros((n, c, h * scale, w * scale))
    for bi in range(n):
        for ch in range(c):
            for j in range(w * scale):
                out[bi, ch, :, j] = bilinear_1d(rows[bi, ch, :, j], scale)
    return out


def depth_to_space_oracle(x, r=4):
    n, c, h, w = x.shape
    out = np.zeros((n, c // (r * r), h * r, w * r), dtype=x.dtype)
    for bi in range(n):
        for oc in range(c // (r * r)):
            for y in range(h):
                for xx in range(w):
                    for dy in range(r):
                        for dx in range(r):
                            out[bi, oc, r * y + dy, r * xx + dx] = x[bi, r * r * oc + r * dy + dx, y, xx]
    return out


def keys_cubic(t, a=-0.5):
    t = abs(t)
    if t <= 1:
        return (a + 2) * t ** 3 - (a + 3) * t ** 2 + 1
    if t < 2:
        return a * t ** 3 - 5 * a * t ** 2 + 8 * a * t - 4 * a
    return 0.0


def bicubic_weights_oracle(n_in, scale=4):
    """Anti-aliased bicubic downscale weights ``(n_in // scale, n_in)`` by direct formula.

    Output pixel ``i`` is centred at source coordinate ``(i + 0.5) * scale - 0.5``;
    the Keys kernel is stretched by ``scale``; taps beyond the border are
    clamped onto the edge pixel; each row is normalised to sum 1.
    """
    n_out = n_in // scale
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5
        lo = int(math.floor(centre - 2 * scale))
        hi = int(math.ceil(centre + 2 * scale))
        for j in range(lo, hi + 1):
            wgt = keys_cubic((j - centre) / scale) / scale
            m[i, min(max(j, 0), n_in - 1)] += wgt
        m[i] /= m[i].sum()
    return m


def psnr_oracle(pred, ref):
    mse = float(np.mean((np.asarray(pred, np.float64) - np.asarray(ref, np.float64)) ** 2))
    return math.inf if mse == 0 else 10 * math.log10(1.0 / mse)


def param_count_oracle(variant, channels, layers=(4, 4, 4)):
    """Sum of ``9*in*out + out`` over the documented wiring."""
    c = channels

    def conv(i, o):
        return 9 * i * o + o

    if variant == "baseline":
        depth = sum(layers)
        return conv(3, c) + (depth - 2) * conv(c, c) + conv(c, 48)
    first_in = 6 + (c if variant == "full" else 0)
    total = 0
    for n in layers[:2]:
        total += conv(first_in, c) + (n - 1) * conv(c, c)
    total += conv(2 * c, c) + (layers[2] - 2) * conv(c, c) + conv(c, 48)
    if variant == "full":
        total += 2 * conv(c, c)
    return total


def adam_scalar_trace(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    """Plain-Python bias-corrected Adam on one scalar; returns every iterate."""
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        out.append(p)
    return out
