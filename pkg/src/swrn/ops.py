"""Forward and backward kernels on dense NCHW arrays.

Tensors are plain ``numpy.ndarray`` objects shaped ``(batch, channels, height,
width)``.  Every function here is pure: inputs are never mutated and the dtype
of the inputs is preserved (float32 for the training/inference path, float64
when running finite-difference checks).
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ContractViolation

SCALE = 4


@dataclass
class ConvKernel:
    """Weights ``(out, in, 3, 3)`` and bias ``(out,)`` of one 3x3 convolution."""

    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        if self.weight.ndim != 4 or self.weight.shape[2:] != (3, 3):
            raise ContractViolation(f"kernel weight must be (out, in, 3, 3), got {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[0],):
            raise ContractViolation(
                f"bias shape {self.bias.shape} does not match weight shape {self.weight.shape}")

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def size(self) -> int:
        return self.weight.size + self.bias.size

    def copy(self) -> "ConvKernel":
        return ConvKernel(self.weight.copy(), self.bias.copy())


def _check_rank4(x: np.ndarray, what: str = "input"):
    if x.ndim != 4 or min(x.shape) < 1:
        raise ContractViolation(f"{what} must be a non-empty rank-4 NCHW array, got shape {x.shape}")


def _im2col(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, C*9, H*W), rows ordered (c, dy, dx) to match weight.reshape(out, -1)
    b, c, h, w = x.shape
    padded = np.zeros((b, c, h + 2, w + 2), dtype=x.dtype)
    padded[:, :, 1:-1, 1:-1] = x
    cols = np.empty((b, c, 3, 3, h, w), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            cols[:, :, dy, dx] = padded[:, :, dy:dy + h, dx:dx + w]
    return cols.reshape(b, c * 9, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    b = cols.shape[0]
    cols = cols.reshape(b, c, 3, 3, h, w)
    padded = np.zeros((b, c, h + 2, w + 2), dtype=cols.dtype)
    for dy in range(3):
        for dx in range(3):
            padded[:, :, dy:dy + h, dx:dx + w] += cols[:, :, dy, dx]
    return np.ascontiguousarray(padded[:, :, 1:-1, 1:-1])


def conv2d_forward(x: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """3x3 cross-correlation, stride 1, one pixel of zero padding.

    The matrix product is issued per sample (stacked matmul) so a batch
    produces exactly the same bits as its members run separately.
    """
    _check_rank4(x)
    if x.shape[1] != kernel.in_channels:
        raise ContractViolation(
            f"conv input shape {x.shape} incompatible with kernel shape {kernel.weight.shape}")
    b, c, h, w = x.shape
    dtype = np.result_type(x.dtype, kernel.weight.dtype)
    wmat = kernel.weight.reshape(kernel.out_channels, -1).astype(dtype, copy=False)
    bias = kernel.bias.astype(dtype, copy=False)[:, None]
    out = np.matmul(wmat, _im2col(x.astype(dtype, copy=False)))
    out += bias
    return out.reshape(b, kernel.out_channels, h, w)


def conv2d_backward(x: np.ndarray, kernel: ConvKernel, grad_out: np.ndarray,
                    need_input_grad: bool = True):
    """Gradients of :func:`conv2d_forward` w.r.t. input, weight and bias.

    Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_input`` is None when
    ``need_input_grad`` is False (first layer fed by data).
    """
    _check_rank4(x)
    if x.shape[1] != kernel.in_channels:
        raise ContractViolation(
            f"conv input shape {x.shape} incompatible with kernel shape {kernel.weight.shape}")
    b, c, h, w = x.shape
    expected = (b, kernel.out_channels, h, w)
    if grad_out.shape != expected:
        raise ContractViolation(f"grad_out shape {grad_out.shape} != conv output shape {expected}")
    dtype = np.result_type(x.dtype, kernel.weight.dtype, grad_out.dtype)
    wmat = kernel.weight.reshape(kernel.out_channels, -1).astype(dtype, copy=False)
    g = grad_out.reshape(b, kernel.out_channels, h * w).astype(dtype, copy=False)
    cols = _im2col(x.astype(dtype, copy=False))
    grad_w = np.matmul(g, cols.transpose(0, 2, 1)).sum(axis=0)
    grad_x = _col2im(np.matmul(wmat.T, g), c, h, w) if need_input_grad else None
    grad_b = grad_out.sum(axis=(0, 2, 3), dtype=dtype)
    return grad_x, grad_w.reshape(kernel.weight.shape), grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pass ``grad_out`` where ``x > 0``.  ``x`` may be the pre- or post-activation."""
    if x.shape != grad_out.shape:
        raise ContractViolation(f"relu_backward shape mismatch {x.shape} vs {grad_out.shape}")
    return np.where(x > 0, grad_out, np.zeros((), dtype=grad_out.dtype))


def concat_channels(parts) -> np.ndarray:
    parts = list(parts)
    if not parts:
        raise ContractViolation("concat_channels needs at least one tensor")
    for p in parts:
        _check_rank4(p, "concat part")
    ref = parts[0].shape
    for p in parts[1:]:
        if (p.shape[0], p.shape[2], p.shape[3]) != (ref[0], ref[2], ref[3]):
            raise ContractViolation(
                f"concat_channels: shape {p.shape} incompatible with {ref} (batch/spatial differ)")
    return np.concatenate(parts, axis=1)


def split_channels(x: np.ndarray, sizes) -> list:
    """Inverse of :func:`concat_channels`; also the backward of concat."""
    sizes = list(sizes)
    if sum(sizes) != x.shape[1]:
        raise ContractViolation(f"split sizes {sizes} do not sum to {x.shape[1]} channels")
    bounds = np.cumsum([0] + sizes)
    return [x[:, bounds[k]:bounds[k + 1]] for k in range(len(sizes))]


@lru_cache(maxsize=64)
def _bilinear_taps(n: int, scale: int = SCALE):
    # half-pixel centres, source index clamped at both borders
    src = (np.arange(n * scale) + 0.5) / scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.intp), n - 1)
    i1 = np.minimum(i0 + 1, n - 1)
    lam = src - i0
    lam[i0 == i1] = 0.0
    return i0, i1, lam


@lru_cache(maxsize=64)
def bilinear_matrix(n: int, scale: int = SCALE) -> np.ndarray:
    """Dense ``(scale*n, n)`` interpolation matrix along one axis."""
    i0, i1, lam = _bilinear_taps(n, scale)
    m = np.zeros((n * scale, n))
    rows = np.arange(n * scale)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def bilinear_upsample_x4(x: np.ndarray) -> np.ndarray:
    """Separable bilinear x4 upsampling (half-pixel centres, clamped edges).

    Written as ``a + t * (b - a)`` so constant regions are reproduced exactly.
    """
    _check_rank4(x)
    r0, r1, rl = _bilinear_taps(x.shape[2])
    c0, c1, cl = _bilinear_taps(x.shape[3])
    rl = rl.astype(x.dtype)[:, None]
    cl = cl.astype(x.dtype)
    top, bot = x[:, :, r0, :], x[:, :, r1, :]
    rows = top + rl * (bot - top)
    left, right = rows[..., c0], rows[..., c1]
    return left + cl * (right - left)


def bilinear_upsample_x4_backward(grad_out: np.ndarray, in_shape) -> np.ndarray:
    b, c, h, w = in_shape
    if grad_out.shape != (b, c, SCALE * h, SCALE * w):
        raise ContractViolation(f"grad_out shape {grad_out.shape} does not match input {in_shape}")
    mh = bilinear_matrix(h).astype(grad_out.dtype)
    mw = bilinear_matrix(w).astype(grad_out.dtype)
    return np.einsum("ph,bcpq,qw->bchw", mh, grad_out, mw, optimize=True)


def depth_to_space_x4(x: np.ndarray) -> np.ndarray:
    """``out[c, 4y+dy, 4x+dx] = in[16c + 4dy + dx, y, x]``."""
    _check_rank4(x)
    b, c, h, w = x.shape
    r = SCALE
    if c % (r * r):
        raise ContractViolation(f"depth_to_space_x4 needs channels divisible by 16, got {c}")
    out = x.reshape(b, c // (r * r), r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out).reshape(b, c // (r * r), h * r, w * r)


def space_to_depth_x4(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`depth_to_space_x4` (and its backward)."""
    _check_rank4(x)
    b, c, hh, ww = x.shape
    r = SCALE
    if hh % r or ww % r:
        raise ContractViolation(f"space_to_depth_x4 needs spatial dims divisible by 4, got {x.shape}")
    h, w = hh // r, ww // r
    out = x.reshape(b, c, h, r, w, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out).reshape(b, c * r * r, h, w)


def replicate_pad(x: np.ndarray, pad: int) -> np.ndarray:
    _check_rank4(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="edge")


def replicate_pad_backward(grad_out: np.ndarray, pad: int) -> np.ndarray:
    g = grad_out.copy()
    if pad == 0:
        return g
    g[:, :, pad, :] += g[:, :, :pad, :].sum(axis=2)
    g[:, :, -pad - 1, :] += g[:, :, -pad:, :].sum(axis=2)
    g = g[:, :, pad:-pad, :]
    g[:, :, :, pad] += g[:, :, :, :pad].sum(axis=3)
    g[:, :, :, -pad - 1] += g[:, :, :, -pad:].sum(axis=3)
    return np.ascontiguousarray(g[:, :, :, pad:-pad])
