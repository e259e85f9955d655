"""Charbonnier loss, Adam with step decay, patch sampling and the training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import model, recurrence
from .errors import ConfigurationError, ContractViolation, TrainingDivergence
from .ops import ConvKernel

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 16
    crop: int = 64
    clip_len: int = 10
    total_iters: int = 250_000
    base_lr: float = 1e-3
    lr_halving_period: int = 50_000
    charbonnier_eps: float = 1e-6
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    log_interval: int = 100
    checkpoint_interval: int = 0

    def __post_init__(self):
        for name in ("batch_size", "crop", "clip_len", "total_iters", "lr_halving_period", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.checkpoint_interval < 0:
            raise ConfigurationError("checkpoint_interval must be >= 0")
        if not self.base_lr > 0:
            raise ConfigurationError("base_lr must be positive")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigurationError("Adam betas must lie in [0, 1)")
        if not self.charbonnier_eps > 0:
            raise ConfigurationError("charbonnier_eps must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


def charbonnier_loss(pred: np.ndarray, target: np.ndarray, eps: float = 1e-6):
    """Mean of ``sqrt(d^2 + eps^2)`` and its gradient w.r.t. ``pred``.

    The mean is accumulated as ``eps + mean(d^2 / (sqrt(d^2 + eps^2) + eps))`` in
    float64, which is exactly ``eps`` when ``pred == target``.
    """
    if pred.shape != target.shape:
        raise ContractViolation(f"loss shape mismatch {pred.shape} vs {target.shape}")
    if not eps > 0:
        raise ContractViolation("eps must be positive")
    d = pred.astype(np.float64) - target.astype(np.float64)
    r = np.sqrt(d * d + eps * eps)
    loss = eps + float(np.mean(d * d / (r + eps)))
    grad = (d / r / d.size).astype(pred.dtype)
    return loss, grad


def lr_at(iteration: int, config: TrainConfig) -> float:
    if iteration < 0:
        raise ContractViolation("iteration must be >= 0")
    return config.base_lr * 0.5 ** (iteration // config.lr_halving_period)


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays()},
                   {k: np.zeros_like(a) for k, a in params.arrays()})


def adam_step(params, grads: dict, state: AdamState, lr: float, config: TrainConfig):
    """Bias-corrected Adam.  Returns ``(new_params, new_state)``; inputs are untouched."""
    b1, b2, eps = config.adam_beta1, config.adam_beta2, config.adam_eps
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_m, new_v, kernels = {}, {}, {}
    for name, k in params.kernels.items():
        g = grads[name]
        updated = []
        for part, p, gp in (("weight", k.weight, g.weight), ("bias", k.bias, g.bias)):
            key = f"{name}.{part}"
            if gp.shape != p.shape:
                raise ContractViolation(f"gradient for {key} has shape {gp.shape}, expected {p.shape}")
            if not np.all(np.isfinite(gp)):
                raise TrainingDivergence(f"non-finite gradient in parameter group {key}")
            dt = p.dtype
            m = (b1 * state.m[key] + (1 - b1) * gp).astype(dt)
            v = (b2 * state.v[key] + (1 - b2) * gp * gp).astype(dt)
            step = lr * (m / c1) / (np.sqrt(v / c2) + eps)
            updated.append((p - step).astype(dt))
            new_m[key], new_v[key] = m, v
        kernels[name] = ConvKernel(*updated)
    return model.Parameters(params.config, kernels), AdamState(new_m, new_v, t)


def sample_batch(dataset, config: TrainConfig, rng: np.random.Generator):
    """Random clips, start frames and one LR crop per clip applied to every frame.

    Returns ``(lr, hr)`` shaped ``(B, T, 3, crop, crop)`` and ``(B, T, 3, 4crop, 4crop)``.
    """
    usable = [c for c in dataset
              if c.lr.shape[0] >= config.clip_len and min(c.lr.shape[2:]) >= config.crop]
    if not usable:
        raise ConfigurationError(
            f"no clip has >= {config.clip_len} frames and LR size >= {config.crop}")
    s, t = config.crop, config.clip_len
    lr = np.empty((config.batch_size, t, 3, s, s), np.float32)
    hr = np.empty((config.batch_size, t, 3, 4 * s, 4 * s), np.float32)
    for b in range(config.batch_size):
        c = usable[int(rng.integers(len(usable)))]
        t0 = int(rng.integers(c.lr.shape[0] - t + 1))
        y = int(rng.integers(c.lr.shape[2] - s + 1))
        x = int(rng.integers(c.lr.shape[3] - s + 1))
        lr[b] = c.lr[t0:t0 + t, :, y:y + s, x:x + s]
        hr[b] = c.hr[t0:t0 + t, :, 4 * y:4 * (y + s), 4 * x:4 * (x + s)]
    return lr, hr


def clip_loss_and_grads(params, lr_clip: np.ndarray, hr_clip: np.ndarray, eps: float):
    """Mean Charbonnier over every frame of ``(B, T, ...)`` clips, plus BPTT gradients."""
    frames = [np.ascontiguousarray(lr_clip[:, i]) for i in range(lr_clip.shape[1])]
    run = recurrence.run_clip(params, frames, "train")
    pred = np.stack(run.outputs, axis=1)
    loss, grad = charbonnier_loss(pred, hr_clip, eps)
    grads = recurrence.backward_clip(params, run, [grad[:, i] for i in range(grad.shape[1])])
    return loss, grads


def clip_loss(params, lr_clip: np.ndarray, hr_clip: np.ndarray, eps: float) -> float:
    frames = [np.ascontiguousarray(lr_clip[:, i]) for i in range(lr_clip.shape[1])]
    run = recurrence.run_clip(params, frames, "infer")
    return charbonnier_loss(np.stack(run.outputs, axis=1), hr_clip, eps)[0]


@dataclass
class TrainReport:
    params: model.Parameters
    curve: list = field(default_factory=list)  # (iter, lr, loss)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    iterations: int = 0

    def csv(self) -> str:
        return "iter,lr,loss\n" + "".join(f"{i},{lr:.10f},{loss:.10f}\n" for i, lr, loss in self.curve)


def train(model_cfg: model.ModelConfig, train_cfg: TrainConfig, dataset, checkpoint_sink=None,
          init=None, on_record=None) -> TrainReport:
    """Run the training loop.

    ``checkpoint_sink(iteration, params)`` is called every
    ``checkpoint_interval`` iterations and once at the end; ``on_record`` gets
    each ``(iter, lr, loss)`` log record as it is produced.
    """
    seeds = np.random.SeedSequence(train_cfg.seed).spawn(2)
    params = init if init is not None else model.init_params(
        model_cfg, int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    state = AdamState.zeros_like(params)
    report = TrainReport(params)
    for it in range(train_cfg.total_iters):
        lr_clip, hr_clip = sample_batch(dataset, train_cfg, rng)
        loss, grads = clip_loss_and_grads(params, lr_clip, hr_clip, train_cfg.charbonnier_eps)
        if not np.isfinite(loss):
            raise TrainingDivergence(
                f"non-finite loss at iteration {it}; last finite record {report.curve[-1:] or None}")
        if it == 0:
            report.initial_loss = loss
        lr = lr_at(it, train_cfg)
        params, state = adam_step(params, grads, state, lr, train_cfg)
        if it % train_cfg.log_interval == 0 or it == train_cfg.total_iters - 1:
            rec = (it, lr, loss)
            report.curve.append(rec)
            if on_record is not None:
                on_record(rec)
            log.debug("iter %d lr %.3g loss %.6f", *rec)
        if checkpoint_sink is not None and train_cfg.checkpoint_interval and \
                (it + 1) % train_cfg.checkpoint_interval == 0:
            checkpoint_sink(it + 1, params)
    report.params = params
    report.final_loss = loss
    report.iterations = train_cfg.total_iters
    if checkpoint_sink is not None:
        checkpoint_sink(train_cfg.total_iters, params)
    return report
