"""Overfit the 8-channel full model to one 10-frame 64x64 clip and report the result.

    python demos/memorize.py [iterations]

The default 2000 iterations take a few minutes on one core.
"""
import sys
import time

import numpy as np

from swrn import data, model, recurrence, training

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 2000
# float pixels: 8-bit HR targets carry rounding noise no network can predict
pair = data.synth_pair("moving_gradient", 10, 64, seed=6, quantize=False)
cfg = model.ModelConfig(channels=8)
init = model.init_params(cfg, 1)
tc = training.TrainConfig(batch_size=1, crop=32, clip_len=10, total_iters=iters, base_lr=1e-3,
                          lr_halving_period=max(iters // 5, 1), log_interval=250)

t0 = time.perf_counter()
rep = training.train(cfg, tc, [pair], init=init,
                     on_record=lambda r: print("iter %5d  lr %.2e  patch loss %.5f" % r, flush=True))
secs = time.perf_counter() - t0

before = training.clip_loss(init, pair.lr[None], pair.hr[None], tc.charbonnier_eps)
after = training.clip_loss(rep.params, pair.lr[None], pair.hr[None], tc.charbonnier_eps)
outs = recurrence.run_clip(rep.params, [pair.lr[i:i + 1] for i in range(10)]).outputs
psnr = np.mean([data.psnr(np.clip(y, 0, 1), pair.hr[i:i + 1]) for i, y in enumerate(outs)])
print(f"{iters} iterations, {secs:.0f} s")
print(f"whole-clip loss {before:.4f} -> {after:.5f} ({before / after:.0f}x)")
print(f"PSNR on the clip: {psnr:.2f} dB")
