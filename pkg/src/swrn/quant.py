"""Post-training INT8 quantization and an integer-domain inference path.

Scheme: symmetric, per-tensor, round-half-away-from-zero, ``q in [-127, 127]``.
Weights use ``max|w| / 127``; every convolution input gets an activation scale
from calibration.  Biases are stored as int32 in the product scale
``weight_scale * input_scale``.  The bilinear residual stays in float.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model, ops
from .errors import ConfigurationError, ContractViolation, QuantOverflow
from .recurrence import ClipRun, HiddenPair, _frames, window_at

QMAX = 127
INT32_MAX = 2 ** 31 - 1


def round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def scale_for(max_abs: float) -> float:
    """Per-tensor scale; an all-zero tensor gets scale 1."""
    max_abs = float(max_abs)
    return max_abs / QMAX if max_abs > 0 else 1.0


def quantize_tensor(x: np.ndarray, scale: float | None = None):
    """Return ``(q, scale)`` with ``q`` int8.  ``scale`` defaults to ``max|x| / 127``."""
    x = np.asarray(x, dtype=np.float64)
    if scale is None:
        scale = scale_for(np.max(np.abs(x)) if x.size else 0.0)
    if not scale > 0:
        raise ContractViolation(f"quantization scale must be positive, got {scale}")
    q = np.clip(round_half_away(x / scale), -QMAX, QMAX).astype(np.int8)
    return q, scale


def dequantize(q: np.ndarray, scale: float) -> np.ndarray:
    return q.astype(np.float64) * scale


@dataclass
class QTensor:
    """An int8 activation together with its scale."""

    q: np.ndarray
    scale: float

    def dequantize(self, dtype=np.float32) -> np.ndarray:
        return dequantize(self.q, self.scale).astype(dtype)


@dataclass
class CalibrationStats:
    max_abs: dict = field(default_factory=dict)
    count: int = 0

    def observe(self, site: str, value: np.ndarray):
        m = float(np.max(np.abs(value))) if value.size else 0.0
        self.max_abs[site] = max(self.max_abs.get(site, 0.0), m)

    def merged(self, other: "CalibrationStats") -> "CalibrationStats":
        out = CalibrationStats(dict(self.max_abs), self.count + other.count)
        for k, v in other.max_abs.items():
            out.max_abs[k] = max(out.max_abs.get(k, 0.0), v)
        return out


def _observe_step(stats, params, x_cur, y, tr):
    stats.observe("x", x_cur)
    stats.observe("y", y)
    for group in tr["saved"].values():
        for name, x_in in group:
            stats.observe(f"{name}.in", x_in)
    stats.observe("head_out", tr["head_out"])
    if params.config.has_hidden:
        stats.observe("h_fwd_update.in", tr["fea_f"])
        stats.observe("h_bwd_update.in", tr["fea_b"])
        stats.observe("h_fwd", tr["h_fwd_next"])
        stats.observe("h_bwd", tr["h_bwd_next"])


def calibrate(params, clips, stats: CalibrationStats | None = None) -> CalibrationStats:
    """Record the running max-abs of every activation site over float inference.

    ``clips`` is a list of FrameSequences (or frame lists).  Passing ``stats``
    continues an earlier calibration.
    """
    clips = list(clips)
    if not clips:
        raise ConfigurationError("calibration needs at least one clip")
    stats = CalibrationStats(dict(stats.max_abs), stats.count) if stats else CalibrationStats()
    for clip in clips:
        frames = _frames(clip)
        b, _, h, w = frames[0].shape
        hf = model.zero_hidden(params.config, b, h, w)
        hb = model.zero_hidden(params.config, b, h, w)
        for i in range(len(frames)):
            xp, xc, xn = window_at(frames, i)
            # train mode only to keep the intermediate activations
            y, hf, hb, tr = model.forward(params, xp, xc, xn, hf, hb, "train")
            _observe_step(stats, params, xc, y, tr)
            stats.count += 1
    return stats


@dataclass
class QuantKernel:
    q_weight: np.ndarray      # int8 (out, in, 3, 3)
    weight_scale: float
    q_bias: np.ndarray        # int32 (out,)
    input_scale: float

    @property
    def acc_scale(self) -> float:
        return self.weight_scale * self.input_scale


@dataclass
class QuantModel:
    config: model.ModelConfig
    kernels: dict
    act_scales: dict

    def dequantized_params(self) -> model.Parameters:
        """Float parameters equal to what the int8 weights represent."""
        return model.Parameters(self.config, {
            n: ops.ConvKernel(dequantize(k.q_weight, k.weight_scale).astype(np.float32),
                              (k.q_bias.astype(np.float64) * k.acc_scale).astype(np.float32))
            for n, k in self.kernels.items()})


def quantize_model(params, stats: CalibrationStats) -> QuantModel:
    if stats.count < 1:
        raise ConfigurationError("calibration statistics are empty")
    kernels = {}
    for name, k in params.kernels.items():
        site = f"{name}.in"
        if site not in stats.max_abs:
            raise ConfigurationError(f"no calibration data for activation site {site}")
        in_scale = scale_for(stats.max_abs[site])
        qw, w_scale = quantize_tensor(k.weight)
        qb = round_half_away(k.bias.astype(np.float64) / (w_scale * in_scale))
        if np.any(np.abs(qb) > INT32_MAX):
            raise QuantOverflow(f"bias of layer {name} does not fit in int32")
        kernels[name] = QuantKernel(qw, w_scale, qb.astype(np.int32), in_scale)
    act = {}
    if params.config.has_hidden:
        for site in ("h_fwd", "h_bwd"):
            act[site] = scale_for(stats.max_abs[site])
    return QuantModel(params.config, kernels, act)


def int_conv(q_in: np.ndarray, k: QuantKernel, layer: str = "") -> np.ndarray:
    """int8 x int8 convolution with an int64 result (checked against int32 range).

    Products and sums stay below 2**53, so a float64 matrix product is an exact
    integer accumulator; the result is converted back to integers.
    """
    acc = ops.conv2d_forward(q_in.astype(np.float64),
                             ops.ConvKernel(k.q_weight.astype(np.float64), k.q_bias.astype(np.float64)))
    acc = acc.astype(np.int64)
    if acc.size and np.max(np.abs(acc)) > INT32_MAX:
        raise QuantOverflow(f"layer {layer}: accumulator exceeds int32; calibration does not cover input")
    return acc


def _qconv(x: np.ndarray, k: QuantKernel, name: str, relu: bool) -> np.ndarray:
    q_in, _ = quantize_tensor(x, k.input_scale)
    out = int_conv(q_in, k, name).astype(np.float64) * k.acc_scale
    out = out.astype(np.float32)
    return ops.relu(out) if relu else out


def _qchain(qmodel, prefix, x, relu_last):
    names = [n for n in qmodel.kernels if n.split(".")[0] == prefix]
    for i, n in enumerate(names):
        x = _qconv(x, qmodel.kernels[n], n, relu_last or i < len(names) - 1)
    return x


def _as_float(h):
    if h is None:
        return None
    return h.dequantize() if isinstance(h, QTensor) else h


def quantized_forward(qmodel: QuantModel, x_prev, x_cur, x_next, h_fwd=None, h_bwd=None):
    """Integer-domain counterpart of ``model.forward(..., mode="infer")``.

    Hidden states come back as :class:`QTensor` (int8 + scale); float arrays
    are also accepted on input.  Returns ``(y, h_fwd_next, h_bwd_next, None)``.
    """
    cfg = qmodel.config
    b, _, h, w = x_cur.shape
    if cfg.has_hidden:
        hshape = (b, cfg.channels, h, w)
        if h_fwd is None:
            h_fwd = np.zeros(hshape, np.float32)
        if h_bwd is None:
            h_bwd = np.zeros(hshape, np.float32)
        h_fwd, h_bwd = _as_float(h_fwd), _as_float(h_bwd)
        if h_fwd.shape != hshape or h_bwd.shape != hshape:
            raise ContractViolation(f"hidden state shapes {h_fwd.shape}/{h_bwd.shape}, expected {hshape}")
    if cfg.variant == "baseline":
        feat = _qchain(qmodel, "f2", _qchain(qmodel, "f1", x_cur, True), True)
        head_in = feat
    else:
        extra_f = [h_fwd] if cfg.has_hidden else []
        extra_b = [h_bwd] if cfg.has_hidden else []
        fea_f = _qchain(qmodel, "f1", ops.concat_channels([x_prev, x_cur] + extra_f), True)
        fea_b = _qchain(qmodel, "f2", ops.concat_channels([x_next, x_cur] + extra_b), True)
        head_in = ops.concat_channels([fea_f, fea_b])
    head_out = _qchain(qmodel, "f3", head_in, False)
    y = ops.depth_to_space_x4(head_out) + ops.bilinear_upsample_x4(x_cur)
    if cfg.has_hidden:
        hf = _qconv(fea_f, qmodel.kernels["h_fwd_update"], "h_fwd_update", True)
        hb = _qconv(fea_b, qmodel.kernels["h_bwd_update"], "h_bwd_update", True)
        s_f, s_b = qmodel.act_scales["h_fwd"], qmodel.act_scales["h_bwd"]
        h_next = (QTensor(quantize_tensor(hf, s_f)[0], s_f), QTensor(quantize_tensor(hb, s_b)[0], s_b))
    else:
        z = np.zeros((b, cfg.channels, h, w), np.int8)
        h_next = (QTensor(z, 1.0), QTensor(z.copy(), 1.0))
    return y, h_next[0], h_next[1], None


def run_clip_quantized(qmodel: QuantModel, clip) -> ClipRun:
    frames = _frames(clip)
    if not frames:
        raise ContractViolation("cannot run an empty clip")
    hf = hb = None
    outputs = []
    for i in range(len(frames)):
        xp, xc, xn = window_at(frames, i)
        y, hf, hb, _ = quantized_forward(qmodel, xp, xc, xn, hf, hb)
        outputs.append(y)
    return ClipRun(outputs, HiddenPair(hf, hb), len(frames))
