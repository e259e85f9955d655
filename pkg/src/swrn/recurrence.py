"""Drive the network over a clip with zero-initialised hidden states."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model
from .errors import ContractViolation


@dataclass
class HiddenPair:
    h_fwd: np.ndarray
    h_bwd: np.ndarray

    @classmethod
    def zeros(cls, config, batch, height, width, dtype=np.float32):
        return cls(model.zero_hidden(config, batch, height, width, dtype),
                   model.zero_hidden(config, batch, height, width, dtype))


@dataclass
class ClipRun:
    outputs: list
    final_state: HiddenPair
    steps: int
    traces: list = field(default_factory=list)


def _frames(clip) -> list:
    frames = getattr(clip, "frames", clip)
    if isinstance(frames, np.ndarray):
        # (T, B, C, H, W) stacked clip
        frames = list(frames)
    return list(frames)


def window_at(clip, i: int):
    """``(x_prev, x_cur, x_next)`` around frame ``i``; the ends are replicated."""
    frames = _frames(clip)
    n = len(frames)
    if not 0 <= i < n:
        raise ContractViolation(f"frame index {i} out of range for clip of length {n}")
    return frames[max(i - 1, 0)], frames[i], frames[min(i + 1, n - 1)]


def run_clip(params, clip, mode: str = "infer") -> ClipRun:
    """Single left-to-right sweep: one network evaluation per frame.

    ``clip`` is a FrameSequence or any sequence of ``(B, 3, H, W)`` arrays.
    In ``train`` mode the per-step traces are kept for :func:`backward_clip`.
    """
    frames = _frames(clip)
    if not frames:
        raise ContractViolation("cannot run an empty clip")
    shape = frames[0].shape
    for j, f in enumerate(frames):
        if f.shape != shape:
            raise ContractViolation(f"frame {j} has shape {f.shape}, expected {shape}")
    b, _, h, w = shape
    state = HiddenPair.zeros(params.config, b, h, w, np.result_type(frames[0].dtype, np.float32))
    outputs, traces = [], []
    for i in range(len(frames)):
        x_prev, x_cur, x_next = window_at(frames, i)
        y, hf, hb, tr = model.forward(params, x_prev, x_cur, x_next, state.h_fwd, state.h_bwd, mode)
        outputs.append(y)
        if tr is not None:
            traces.append(tr)
        state = HiddenPair(hf, hb)
    return ClipRun(outputs, state, len(frames), traces)


def backward_clip(params, run: ClipRun, grad_outputs) -> dict:
    """Backpropagation through time over every step of a train-mode run.

    Returns summed parameter gradients keyed like ``params.kernels``.
    """
    if len(run.traces) != run.steps:
        raise ContractViolation("backward_clip needs a run produced in train mode")
    if len(grad_outputs) != run.steps:
        raise ContractViolation(f"expected {run.steps} output gradients, got {len(grad_outputs)}")
    total = None
    g_hf = g_hb = None
    for t in range(run.steps - 1, -1, -1):
        grads, g_hf, g_hb = model.backward(params, run.traces[t], grad_outputs[t], g_hf, g_hb)
        if total is None:
            total = grads
        else:
            for name, g in grads.items():
                total[name].weight += g.weight
                total[name].bias += g.bias
    return total
