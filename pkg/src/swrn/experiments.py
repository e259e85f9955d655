"""Desk-scale experiments: host latency benchmark and the variant ablation."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import data, model, quant, training


def benchmark(params, height: int, width: int, runs: int = 10, warmup: int = 3, qmodel=None,
              seed: int = 0) -> dict:
    """Wall-clock milliseconds per frame (one network evaluation) on this host.

    Not comparable with on-device latencies; warmup runs are excluded.
    """
    if runs < 1 or warmup < 0:
        raise ValueError("runs must be >= 1 and warmup >= 0")
    rng = np.random.default_rng(seed)
    x = rng.uniform(0, 1, (3, 1, 3, height, width)).astype(np.float32)
    hf = model.zero_hidden(params.config, 1, height, width)
    hb = model.zero_hidden(params.config, 1, height, width)
    times = []
    for i in range(warmup + runs):
        t0 = time.perf_counter()
        if qmodel is None:
            model.forward(params, x[0], x[1], x[2], hf, hb, "infer")
        else:
            quant.quantized_forward(qmodel, x[0], x[1], x[2], hf, hb)
        dt = (time.perf_counter() - t0) * 1e3
        if i >= warmup:
            times.append(dt)
    return {"mean_ms": float(np.mean(times)), "min_ms": float(np.min(times)),
            "max_ms": float(np.max(times)), "runs": runs}


@dataclass
class AblationRow:
    variant: str
    seed: int
    params: int
    ms_per_frame: float
    psnr_db: float
    final_loss: float


def ablation_csv(rows) -> str:
    lines = ["variant,seed,params,ms_per_frame,psnr_db"]
    lines += [f"{r.variant},{r.seed},{r.params},{r.ms_per_frame:.3f},{r.psnr_db:.4f}" for r in rows]
    return "\n".join(lines) + "\n"


def run_ablation(base_cfg: model.ModelConfig, train_cfg: training.TrainConfig, train_set, test_set,
                 seeds=(0,), variants=model.VARIANTS, bench_runs: int = 3, log=None) -> list:
    """Train each variant under one shared config and seed; report size, latency and test PSNR."""
    rows = []
    for seed in seeds:
        tc = replace(train_cfg, seed=seed)
        for v in variants:
            cfg = replace(base_cfg, variant=v)
            rep = training.train(cfg, tc, train_set)
            psnr = data.evaluate(rep.params, test_set).mean_psnr
            h, w = test_set[0].lr.shape[2:]
            ms = benchmark(rep.params, h, w, runs=bench_runs, warmup=1)["mean_ms"]
            row = AblationRow(v, seed, model.param_count(rep.params), ms, psnr, rep.final_loss)
            if log is not None:
                log(row)
            rows.append(row)
    return rows
