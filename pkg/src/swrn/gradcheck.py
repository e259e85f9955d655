"""Central finite-difference checks of every analytic backward pass.

All checks run in float64: with a 1e-3 step, float32 round-off alone would
exceed the 1e-4 relative tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model, ops, recurrence, training

STEP = 1e-3
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    rel_error: float
    tolerance: float = TOLERANCE

    @property
    def ok(self) -> bool:
        return bool(self.rel_error <= self.tolerance)

    def __str__(self):
        return f"{'PASS' if self.ok else 'FAIL'} {self.name}: rel_error={self.rel_error:.3e} (tol {self.tolerance:g})"


def numerical_gradient(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. every element of ``x`` (mutated and restored)."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return grad


def kink_aware_gradient(f, x: np.ndarray, step: float = STEP, min_step: float = 1e-8):
    """Central differences for a piecewise-smooth ``f() -> (value, pattern)``.

    ``pattern`` is a boolean array of every ReLU gate.  When the +/- probe
    changes the pattern the difference quotient straddles a kink, so the step
    is halved for that coordinate until both probes keep the base pattern.
    Returns ``(grad, n_reduced)``.
    """
    _, base = f()
    grad = np.zeros_like(x, dtype=np.float64)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    reduced = 0
    for i in range(flat.size):
        orig, h = flat[i], step
        while True:
            flat[i] = orig + h
            fp, sp = f()
            flat[i] = orig - h
            fm, sm = f()
            flat[i] = orig
            if (np.array_equal(sp, base) and np.array_equal(sm, base)) or h / 2 < min_step:
                break
            h /= 2
        reduced += h != step
        gflat[i] = (fp - fm) / (2 * h)
    return grad, reduced


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n))
    if denom == 0.0:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def _projected(fn, cot):
    return lambda: float(np.sum(fn() * cot))


def check_ops(seed: int = 0) -> list:
    """Finite-difference checks of each tensor kernel against its backward."""
    rng = np.random.default_rng(seed)
    results = []

    x = rng.standard_normal((2, 3, 5, 6))
    k = ops.ConvKernel(rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4))
    cot = rng.standard_normal((2, 4, 5, 6))
    gx, gw, gb = ops.conv2d_backward(x, k, cot)
    f = _projected(lambda: ops.conv2d_forward(x, k), cot)
    results.append(CheckResult("conv2d/input", rel_error(gx, numerical_gradient(f, x))))
    results.append(CheckResult("conv2d/weight", rel_error(gw, numerical_gradient(f, k.weight))))
    results.append(CheckResult("conv2d/bias", rel_error(gb, numerical_gradient(f, k.bias))))

    # keep inputs away from the kink so the difference quotient is valid
    x = rng.standard_normal((2, 3, 4, 4))
    x[np.abs(x) < 10 * STEP] += 0.1
    cot = rng.standard_normal(x.shape)
    f = _projected(lambda: ops.relu(x), cot)
    results.append(CheckResult("relu", rel_error(ops.relu_backward(x, cot), numerical_gradient(f, x))))

    x = rng.standard_normal((2, 3, 4, 5))
    cot = rng.standard_normal((2, 3, 16, 20))
    f = _projected(lambda: ops.bilinear_upsample_x4(x), cot)
    results.append(CheckResult("bilinear_upsample_x4",
                               rel_error(ops.bilinear_upsample_x4_backward(cot, x.shape),
                                         numerical_gradient(f, x))))

    x = rng.standard_normal((2, 32, 3, 2))
    cot = rng.standard_normal((2, 2, 12, 8))
    f = _projected(lambda: ops.depth_to_space_x4(x), cot)
    results.append(CheckResult("depth_to_space_x4",
                               rel_error(ops.space_to_depth_x4(cot), numerical_gradient(f, x))))

    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 5, 4, 4))
    cot = rng.standard_normal((2, 8, 4, 4))
    f = _projected(lambda: ops.concat_channels([a, b]), cot)
    ga, gb_ = ops.split_channels(cot, [3, 5])
    results.append(CheckResult("concat_channels",
                               max(rel_error(ga, numerical_gradient(f, a)), rel_error(gb_, numerical_gradient(f, b)))))

    x = rng.standard_normal((1, 2, 4, 5))
    cot = rng.standard_normal((1, 2, 8, 9))
    f = _projected(lambda: ops.replicate_pad(x, 2), cot)
    results.append(CheckResult("replicate_pad",
                               rel_error(ops.replicate_pad_backward(cot, 2), numerical_gradient(f, x))))

    pred = rng.uniform(0, 1, (1, 3, 4, 4))
    target = rng.uniform(0, 1, (1, 3, 4, 4))
    _, g = training.charbonnier_loss(pred, target, 1e-6)
    f = lambda: training.charbonnier_loss(pred, target, 1e-6)[0]  # noqa: E731
    results.append(CheckResult("charbonnier", rel_error(g, numerical_gradient(f, pred))))
    return results


def model_problem(variant: str = "full", channels: int = 4, size: int = 8, frames: int = 3,
                  batch: int = 1, seed: int = 0):
    """A small float64 instance: ``(params, lr_clip (B,T,3,s,s), hr_clip)``."""
    cfg = model.ModelConfig(channels=channels, variant=variant)
    params = model.init_params(cfg, seed).astype(np.float64)
    rng = np.random.default_rng(seed + 1)
    for k in params.kernels.values():
        k.bias[:] = rng.uniform(-0.05, 0.05, k.bias.shape)
    lr = rng.uniform(0, 1, (batch, frames, 3, size, size))
    # targets sit 0.2-0.5 away from the initial prediction so no residual crosses
    # the Charbonnier kink (curvature ~1/eps) inside a finite-difference step
    pred = np.stack(recurrence.run_clip(params, [lr[:, t] for t in range(frames)]).outputs, axis=1)
    hr = pred + rng.choice([-1.0, 1.0], pred.shape) * rng.uniform(0.2, 0.5, pred.shape)
    return params, lr, hr


def relu_pattern(run) -> np.ndarray:
    """Every ReLU gate (and residual sign) touched by a train-mode clip run."""
    bits = []
    for tr in run.traces:
        for group in tr["saved"].values():
            bits += [x > 0 for _, x in group[1:]]
        bits.append(tr["head_in"] > 0)
        if tr["fea_f"] is not None:
            bits += [tr["fea_f"] > 0, tr["fea_b"] > 0]
        bits += [tr["h_fwd_next"] > 0, tr["h_bwd_next"] > 0]
    return np.concatenate([b.ravel() for b in bits])


def _loss_with_pattern(params, lr, hr, eps):
    frames = [np.ascontiguousarray(lr[:, t]) for t in range(lr.shape[1])]
    run = recurrence.run_clip(params, frames, "train")
    pred = np.stack(run.outputs, axis=1)
    loss, _ = training.charbonnier_loss(pred, hr, eps)
    return loss, np.concatenate([relu_pattern(run), (pred > hr).ravel()])


def check_model(variant: str = "full", channels: int = 4, size: int = 8, frames: int = 3,
                seed: int = 0, eps: float = 1e-6, step: float = STEP, stats: dict | None = None) -> list:
    """BPTT gradients of the clip Charbonnier loss vs. finite differences, per layer group.

    Every weight and bias is probed.  ``stats`` (if given) receives the number
    of coordinates whose step had to shrink to avoid a ReLU kink.
    """
    params, lr, hr = model_problem(variant, channels, size, frames, seed=seed)
    _, grads = training.clip_loss_and_grads(params, lr, hr, eps)
    loss = lambda: _loss_with_pattern(params, lr, hr, eps)  # noqa: E731
    results = []
    reduced = total = 0
    groups = {}
    for name, k in params.kernels.items():
        groups.setdefault(name.split(".")[0], []).append(name)
    for group, names in groups.items():
        a, n = [], []
        for name in names:
            for part in ("weight", "bias"):
                arr = getattr(params.kernels[name], part)
                g, r = kink_aware_gradient(loss, arr, step)
                a.append(getattr(grads[name], part).ravel())
                n.append(g.ravel())
                reduced += r
                total += arr.size
        results.append(CheckResult(f"{variant}/{group}", rel_error(np.concatenate(a), np.concatenate(n))))
    if stats is not None:
        stats.update(reduced=reduced, total=total)
    return results


def run_all(verbose: bool = True) -> bool:
    results = check_ops() + check_model("full")
    for v in ("sliding_window", "baseline"):
        results += check_model(v, frames=2)
    if verbose:
        for r in results:
            print(r)
    return all(r.ok for r in results)
