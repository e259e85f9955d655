"""Walk through the library on a synthetic clip: train, evaluate, quantize, save, time.

    python demos/quickstart.py

Takes well under a minute on one core.
"""
import tempfile
from pathlib import Path

import numpy as np

from swrn import checkpoint, data, experiments, model, quant, recurrence, training

# a moving, sub-pixel shifted pattern, bicubic-downsampled x4 to 16x16 LR
pair = data.synth_pair("moving_gradient", frames=6, lr_size=16, seed=6)
print("LR clip", pair.lr.shape, "HR clip", pair.hr.shape)

cfg = model.ModelConfig(channels=8)
print("full model, 8 channels:", model.param_count(model.Parameters.zeros(cfg)), "parameters")

# zero weights reduce the network to its bilinear residual path
bilinear = data.evaluate(model.Parameters.zeros(cfg), [pair]).mean_psnr
print(f"bilinear x4 PSNR: {bilinear:.2f} dB")

tc = training.TrainConfig(batch_size=2, crop=16, clip_len=6, total_iters=200, base_lr=1e-3,
                          lr_halving_period=100, log_interval=50)
rep = training.train(cfg, tc, [pair], on_record=lambda r: print("iter %d  lr %.2e  loss %.5f" % r))
print(f"trained PSNR: {data.evaluate(rep.params, [pair]).mean_psnr:.2f} dB")

# one sweep over the clip, one network evaluation per frame
frames = [pair.lr[i:i + 1] for i in range(len(pair.lr))]
run = recurrence.run_clip(rep.params, frames)
print("outputs:", len(run.outputs), "x", run.outputs[0].shape)

qm = quant.quantize_model(rep.params, quant.calibrate(rep.params, [frames]))
q_out = quant.run_clip_quantized(qm, frames).outputs
gap = np.mean([data.psnr(a, b) for a, b in zip(q_out, run.outputs)])
print(f"int8 vs float output PSNR: {gap:.1f} dB")

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "model.swrn"
    checkpoint.save_checkpoint(path, rep.params, qm)
    p2, q2 = checkpoint.load_checkpoint(path)
    print("checkpoint bytes:", path.stat().st_size, "quantized section:", q2 is not None)

stats = experiments.benchmark(rep.params, 16, 16, runs=5, warmup=1)
print(f"host latency, 16x16 LR frame: {stats['mean_ms']:.2f} ms")
