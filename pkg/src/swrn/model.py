"""The sliding-window recurrent super-resolution network.

Three variants share one code path:

``full``
    forward branch ``f1`` on (prev, cur, h_fwd), backward branch ``f2`` on
    (next, cur, h_bwd), aggregation head ``f3`` on both feature maps, and two
    hidden-state update convolutions.
``sliding_window``
    same branches without hidden states.
``baseline``
    a plain chain ``f1 -> f2 -> f3`` on the current frame only.

Every network predicts a 48-map residual which is rearranged by depth-to-space
and added to the bilinear x4 upsampling of the current frame.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .errors import ContractViolation
from .ops import ConvKernel

VARIANTS = ("baseline", "sliding_window", "full")
CHANNEL_PRESETS = (8, 16, 32)
COLOR = 3
SCALE = 4
OUT_MAPS = COLOR * SCALE * SCALE


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 16
    variant: str = "full"
    layers_f1: int = 4
    layers_f2: int = 4
    layers_f3: int = 4
    hidden_update_layers: int = 2
    color_channels: int = COLOR
    scale: int = SCALE

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ContractViolation(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.channels < 1:
            raise ContractViolation("channels must be positive")
        if min(self.layers_f1, self.layers_f2, self.layers_f3) < 1:
            raise ContractViolation("every layer group needs at least one convolution")
        if self.color_channels != COLOR or self.scale != SCALE:
            raise ContractViolation("only 3 colour channels at scale 4 are supported")
        if self.hidden_update_layers != 2:
            raise ContractViolation("hidden_update_layers is fixed at 2")

    @property
    def has_hidden(self) -> bool:
        return self.variant == "full"

    @property
    def conv_layers(self) -> int:
        n = self.layers_f1 + self.layers_f2 + self.layers_f3
        return n + (self.hidden_update_layers if self.has_hidden else 0)

    def to_dict(self) -> dict:
        return asdict(self)


def layer_shapes(config: ModelConfig) -> dict:
    """Ordered ``name -> (in_channels, out_channels)`` for the given wiring."""
    c = config.channels
    shapes = {}
    if config.variant == "baseline":
        widths_in = [COLOR] + [c] * (config.layers_f1 + config.layers_f2 + config.layers_f3 - 1)
        k = 0
        for group, n in (("f1", config.layers_f1), ("f2", config.layers_f2), ("f3", config.layers_f3)):
            for i in range(n):
                shapes[f"{group}.{i}"] = (widths_in[k], c)
                k += 1
    else:
        branch_in = 2 * COLOR + (c if config.has_hidden else 0)
        for group, n in (("f1", config.layers_f1), ("f2", config.layers_f2)):
            for i in range(n):
                shapes[f"{group}.{i}"] = (branch_in if i == 0 else c, c)
        for i in range(config.layers_f3):
            shapes[f"f3.{i}"] = (2 * c if i == 0 else c, c)
    last = f"f3.{config.layers_f3 - 1}"
    shapes[last] = (shapes[last][0], OUT_MAPS)
    if config.has_hidden:
        shapes["h_fwd_update"] = (c, c)
        shapes["h_bwd_update"] = (c, c)
    return shapes


@dataclass
class Parameters:
    """Ordered convolution kernels of one network, keyed ``f1.0``, ..., ``h_bwd_update``."""

    config: ModelConfig
    kernels: dict = field(default_factory=dict)

    def __post_init__(self):
        expected = layer_shapes(self.config)
        if list(self.kernels) != list(expected):
            raise ContractViolation(
                f"kernel names {list(self.kernels)} do not match wiring {list(expected)}")
        for name, (cin, cout) in expected.items():
            k = self.kernels[name]
            if k.weight.shape != (cout, cin, 3, 3):
                raise ContractViolation(
                    f"layer {name}: weight shape {k.weight.shape}, expected {(cout, cin, 3, 3)}")

    def group(self, prefix: str) -> list:
        return [k for name, k in self.kernels.items() if name.split(".")[0] == prefix]

    def arrays(self):
        """Yield ``(name, array)`` for every weight then bias, in checkpoint order."""
        for name, k in self.kernels.items():
            yield f"{name}.weight", k.weight
            yield f"{name}.bias", k.bias

    def copy(self) -> "Parameters":
        return Parameters(self.config, {n: k.copy() for n, k in self.kernels.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, {
            n: ConvKernel(k.weight.astype(dtype), k.bias.astype(dtype))
            for n, k in self.kernels.items()})

    @classmethod
    def zeros(cls, config: ModelConfig, dtype=np.float32) -> "Parameters":
        return cls(config, {
            name: ConvKernel(np.zeros((cout, cin, 3, 3), dtype), np.zeros(cout, dtype))
            for name, (cin, cout) in layer_shapes(config).items()})


def init_params(config: ModelConfig, seed: int) -> Parameters:
    """He-normal weights (std ``sqrt(2 / (9 * fan_in))``) and zero biases."""
    rng = np.random.default_rng(seed)
    kernels = {}
    for name, (cin, cout) in layer_shapes(config).items():
        std = np.sqrt(2.0 / (9 * cin))
        w = (rng.standard_normal((cout, cin, 3, 3)) * std).astype(np.float32)
        kernels[name] = ConvKernel(w, np.zeros(cout, np.float32))
    return Parameters(config, kernels)


def param_count(params: Parameters) -> int:
    return sum(k.size for k in params.kernels.values())


def expected_param_count(config: ModelConfig) -> int:
    return sum(9 * cin * cout + cout for cin, cout in layer_shapes(config).values())


def zero_hidden(config: ModelConfig, batch: int, height: int, width: int, dtype=np.float32):
    return np.zeros((batch, config.channels, height, width), dtype=dtype)


# -- chains of conv layers -------------------------------------------------

def _run_chain(kernels, names, x, relu_last: bool, keep: list | None):
    """Run conv(+ReLU) layers; append ``(name, input)`` to ``keep`` for backward."""
    for i, (name, k) in enumerate(zip(names, kernels)):
        if keep is not None:
            keep.append((name, x))
        try:
            x = ops.conv2d_forward(x, k)
        except ContractViolation as exc:
            raise ContractViolation(f"layer {name}: {exc}") from None
        if relu_last or i < len(kernels) - 1:
            x = ops.relu(x)
    return x


def _chain_backward(params, saved, out, grad, relu_last, grads, need_input_grad=True):
    """Reverse of :func:`_run_chain`.  ``out`` is the chain's final output."""
    for i in range(len(saved) - 1, -1, -1):
        name, x_in = saved[i]
        post = out if i == len(saved) - 1 else saved[i + 1][1]
        if relu_last or i < len(saved) - 1:
            grad = ops.relu_backward(post, grad)
        gx, gw, gb = ops.conv2d_backward(x_in, params.kernels[name], grad,
                                         need_input_grad=need_input_grad or i > 0)
        _accumulate(grads, name, gw, gb)
        grad = gx
    return grad


def _accumulate(grads, name, gw, gb):
    if name in grads:
        grads[name].weight += gw
        grads[name].bias += gb
    else:
        grads[name] = ConvKernel(gw, gb)


def _names(params, prefix):
    return [n for n in params.kernels if n.split(".")[0] == prefix]


class ActivationTrace(dict):
    """Intermediate tensors of one training-mode forward pass."""


def forward(params: Parameters, x_prev, x_cur, x_next, h_fwd, h_bwd, mode: str = "infer"):
    """One network evaluation.

    Returns ``(y, h_fwd_next, h_bwd_next, trace)``; ``trace`` is None unless
    ``mode == "train"``.  ``y`` is not clamped.
    """
    if mode not in ("train", "infer"):
        raise ContractViolation(f"mode must be 'train' or 'infer', got {mode!r}")
    cfg = params.config
    for nm, t in (("x_prev", x_prev), ("x_cur", x_cur), ("x_next", x_next)):
        if t.ndim != 4 or t.shape[1] != COLOR or t.shape != x_cur.shape:
            raise ContractViolation(f"{nm} has shape {t.shape}; expected {x_cur.shape} with 3 channels")
    b, _, h, w = x_cur.shape
    hshape = (b, cfg.channels, h, w)
    if cfg.has_hidden:
        for nm, t in (("h_fwd", h_fwd), ("h_bwd", h_bwd)):
            if t is None or t.shape != hshape:
                raise ContractViolation(
                    f"{nm} has shape {None if t is None else t.shape}; expected {hshape}")
    train = mode == "train"
    tr = ActivationTrace(x_shape=x_cur.shape) if train else None
    saved = {g: [] if train else None for g in ("f1", "f2", "f3")}
    k = params.kernels

    if cfg.variant == "baseline":
        feat = _run_chain(params.group("f1"), _names(params, "f1"), x_cur, True, saved["f1"])
        feat = _run_chain(params.group("f2"), _names(params, "f2"), feat, True, saved["f2"])
        head_in = feat
        fea_f = fea_b = None
    else:
        in_f = [x_prev, x_cur] + ([h_fwd] if cfg.has_hidden else [])
        in_b = [x_next, x_cur] + ([h_bwd] if cfg.has_hidden else [])
        fea_f = _run_chain(params.group("f1"), _names(params, "f1"),
                           ops.concat_channels(in_f), True, saved["f1"])
        fea_b = _run_chain(params.group("f2"), _names(params, "f2"),
                           ops.concat_channels(in_b), True, saved["f2"])
        head_in = ops.concat_channels([fea_f, fea_b])
    head_out = _run_chain(params.group("f3"), _names(params, "f3"), head_in, False, saved["f3"])
    y = ops.depth_to_space_x4(head_out) + ops.bilinear_upsample_x4(x_cur)

    if cfg.has_hidden:
        h_fwd_next = ops.relu(ops.conv2d_forward(fea_f, k["h_fwd_update"]))
        h_bwd_next = ops.relu(ops.conv2d_forward(fea_b, k["h_bwd_update"]))
    else:
        h_fwd_next = zero_hidden(cfg, b, h, w, y.dtype)
        h_bwd_next = zero_hidden(cfg, b, h, w, y.dtype)

    if train:
        tr.update(saved=saved, head_in=head_in, head_out=head_out, fea_f=fea_f, fea_b=fea_b,
                  h_fwd_next=h_fwd_next, h_bwd_next=h_bwd_next)
    return y, h_fwd_next, h_bwd_next, tr


def backward(params: Parameters, trace, grad_y, grad_h_fwd_next=None, grad_h_bwd_next=None):
    """Reverse-mode pass through one :func:`forward` call.

    Returns ``(grads, grad_h_fwd, grad_h_bwd)`` where ``grads`` maps layer name
    to a :class:`ConvKernel` of gradients.  Hidden-state gradients are zero for
    variants without recurrence.
    """
    if not trace:
        raise ContractViolation("backward needs the trace of a train-mode forward call")
    cfg = params.config
    b, _, h, w = trace["x_shape"]
    if grad_y.shape != (b, COLOR, SCALE * h, SCALE * w):
        raise ContractViolation(f"grad_y shape {grad_y.shape} does not match forward output")
    grads = {}
    saved = trace["saved"]
    g_head = ops.space_to_depth_x4(grad_y)
    g_head_in = _chain_backward(params, saved["f3"], trace["head_out"], g_head, False, grads)
    hshape = (b, cfg.channels, h, w)
    zero_h = np.zeros(hshape, dtype=grad_y.dtype)

    if cfg.variant == "baseline":
        g = _chain_backward(params, saved["f2"], trace["head_in"], g_head_in, True, grads)
        _chain_backward(params, saved["f1"], saved["f2"][0][1], g, True, grads,
                        need_input_grad=False)
        return _ordered(params, grads), zero_h, zero_h.copy()

    c = cfg.channels
    g_fea_f, g_fea_b = ops.split_channels(g_head_in, [c, c])
    g_fea_f = g_fea_f.copy()
    g_fea_b = g_fea_b.copy()
    if cfg.has_hidden:
        for nm, fea, g_next, g_fea in (
                ("h_fwd_update", trace["fea_f"], grad_h_fwd_next, g_fea_f),
                ("h_bwd_update", trace["fea_b"], grad_h_bwd_next, g_fea_b)):
            if g_next is None:
                continue
            if g_next.shape != hshape:
                raise ContractViolation(f"hidden gradient shape {g_next.shape}, expected {hshape}")
            post = trace["h_fwd_next"] if nm == "h_fwd_update" else trace["h_bwd_next"]
            g_pre = ops.relu_backward(post, g_next)
            gx, gw, gb = ops.conv2d_backward(fea, params.kernels[nm], g_pre)
            _accumulate(grads, nm, gw, gb)
            g_fea += gx
    g_in_f = _chain_backward(params, saved["f1"], trace["fea_f"], g_fea_f, True, grads,
                             need_input_grad=cfg.has_hidden)
    g_in_b = _chain_backward(params, saved["f2"], trace["fea_b"], g_fea_b, True, grads,
                             need_input_grad=cfg.has_hidden)
    if cfg.has_hidden:
        grad_h_fwd = np.ascontiguousarray(g_in_f[:, 2 * COLOR:])
        grad_h_bwd = np.ascontiguousarray(g_in_b[:, 2 * COLOR:])
    else:
        grad_h_fwd, grad_h_bwd = zero_h, zero_h.copy()
    return _ordered(params, grads), grad_h_fwd, grad_h_bwd


def _ordered(params, grads):
    for name, k in params.kernels.items():
        if name not in grads:
            grads[name] = ConvKernel(np.zeros_like(k.weight), np.zeros_like(k.bias))
    return {name: grads[name] for name in params.kernels}


def clamp01(y: np.ndarray) -> np.ndarray:
    return np.clip(y, 0.0, 1.0)
