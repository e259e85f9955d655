"""Command-line entry point: ``swrn <command> ...`` or ``python -m swrn``.

Exit codes: 0 success, 1 contract/config/data error, 2 usage error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path


from . import checkpoint, data, experiments, gradcheck, model, quant, recurrence, training
from .errors import ConfigurationError, SWRNError

log = logging.getLogger("swrn")

_MODEL_KEYS = ("channels", "variant", "layers_f1", "layers_f2", "layers_f3")
_SYNTH_KEYS = {"train_clips", "test_clips", "frames", "lr_size", "seed"}


@dataclass
class RunConfig:
    model: model.ModelConfig
    train: training.TrainConfig
    train_manifest: Path | None = None
    test_manifest: Path | None = None
    synthetic: dict = field(default_factory=dict)
    out_dir: Path = Path("run")

    @classmethod
    def from_dict(cls, doc: dict, base: Path = Path(".")) -> "RunConfig":
        known = set(_MODEL_KEYS) | set(training.TrainConfig.field_names()) | {
            "train_manifest", "test_manifest", "synthetic", "out_dir"}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {unknown}")
        synth = dict(doc.get("synthetic") or {})
        if set(synth) - _SYNTH_KEYS:
            raise ConfigurationError(f"unknown synthetic keys: {sorted(set(synth) - _SYNTH_KEYS)}")
        try:
            mc = model.ModelConfig(**{k: doc[k] for k in _MODEL_KEYS if k in doc})
            tc = training.TrainConfig(**{k: doc[k] for k in training.TrainConfig.field_names() if k in doc})
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from None

        def path(key):
            return base / doc[key] if doc.get(key) else None
        rc = cls(mc, tc, path("train_manifest"), path("test_manifest"), synth,
                 path("out_dir") or base / "run")
        if rc.train_manifest is None and not synth:
            raise ConfigurationError("config needs 'train_manifest' or a 'synthetic' dataset block")
        return rc

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigurationError("config must be a JSON object")
        return cls.from_dict(doc, path.parent)

    def datasets(self):
        """``(train_pairs, test_pairs)``; synthetic clips when no manifest is given."""
        s = {"train_clips": 8, "test_clips": 4, "frames": 10, "lr_size": 32, "seed": 0, **self.synthetic}
        if self.train_manifest is not None:
            train = data.load_dataset(data.load_manifest(self.train_manifest))
        else:
            train = data.synth_dataset(s["train_clips"], s["frames"], s["lr_size"], s["seed"])
        if self.test_manifest is not None:
            test = data.load_dataset(data.load_manifest(self.test_manifest))
        elif self.synthetic:
            test = data.synth_dataset(s["test_clips"], s["frames"], s["lr_size"], s["seed"] + 1)
        else:
            test = train
        return train, test


def _parse_size(text: str):
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("size must be positive")
    return h, w


def _clip_dirs(root: Path) -> list:
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise ConfigurationError(f"{root} contains no clip directories")
    return dirs


def cmd_prepare(args) -> int:
    hr_root, out = Path(args.hr), Path(args.out)
    if args.scale != data.SCALE:
        raise ConfigurationError("only --scale 4 is supported")
    entries, problems = [], []
    for d in _clip_dirs(hr_root):
        clip = data.load_clip(d)
        h, w = clip.shape[2:]
        if h % args.scale or w % args.scale:
            problems.append(f"clip {d.name}: {h}x{w} is not divisible by {args.scale}; "
                            f"center-crop to {h - h % args.scale}x{w - w % args.scale} first")
            continue
        lr = data.FrameSequence([data.bicubic_downsample_x4(f) for f in clip.frames], d.name)
        lr_dir = out / "lr" / d.name
        data.save_clip(lr, lr_dir)
        entries.append(data.ManifestEntry(d.name, lr_dir, d.resolve(), len(clip)))
    if problems:
        raise ConfigurationError("\n".join(problems))
    manifest = data.DatasetManifest(entries)
    (out / "manifest.json").write_text(manifest.to_json(base=out.resolve()))
    print(f"wrote {len(entries)} clips and {out / 'manifest.json'}")
    return 0


def cmd_train(args) -> int:
    rc = RunConfig.load(args.config)
    train_set, _ = rc.datasets()
    rc.out_dir.mkdir(parents=True, exist_ok=True)

    def sink(it, params):
        name = "checkpoint.swrn" if it == rc.train.total_iters else f"checkpoint_{it:08d}.swrn"
        checkpoint.save_checkpoint(rc.out_dir / name, params)

    rep = training.train(rc.model, rc.train, train_set, checkpoint_sink=sink,
                         on_record=lambda r: log.info("iter %d lr %.3g loss %.6f", *r))
    (rc.out_dir / "loss.csv").write_text(rep.csv())
    print(f"trained {rc.model.variant} ({model.param_count(rep.params)} params) for "
          f"{rep.iterations} iterations: loss {rep.initial_loss:.6f} -> {rep.final_loss:.6f}")
    return 0


def _runner(qmodel):
    if qmodel is None:
        return None
    return lambda _params, frames: quant.run_clip_quantized(qmodel, frames)


def _load(args):
    params, qmodel = checkpoint.load_checkpoint(args.ckpt)
    if getattr(args, "quantized", False) and qmodel is None:
        raise ConfigurationError(f"{args.ckpt} has no quantized section")
    return params, (qmodel if getattr(args, "quantized", False) else None)


def cmd_infer(args) -> int:
    params, qmodel = _load(args)
    clip = data.load_clip(args.input)
    run = quant.run_clip_quantized(qmodel, clip) if qmodel else recurrence.run_clip(params, clip)
    out = data.FrameSequence([model.clamp01(y) for y in run.outputs], clip.clip_id)
    data.save_clip(out, args.out)
    print(f"wrote {len(out)} frames of {out.shape[3]}x{out.shape[2]} to {args.out}")
    return 0


def cmd_eval(args) -> int:
    params, qmodel = _load(args)
    report = data.evaluate(params, data.load_manifest(args.manifest), runner=_runner(qmodel))
    text = report.csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_quantize(args) -> int:
    params, _ = checkpoint.load_checkpoint(args.ckpt)
    calib = Path(args.calib)
    if calib.is_file():
        clips = [p.lr for p in data.load_dataset(data.load_manifest(calib))]
        clips = [[c[i:i + 1] for i in range(c.shape[0])] for c in clips]
    else:
        clips = [data.load_clip(calib)]
    stats = quant.calibrate(params, clips)
    qmodel = quant.quantize_model(params, stats)
    checkpoint.save_checkpoint(args.out, params, qmodel)
    print(f"calibrated on {stats.count} frames; wrote {args.out}")
    return 0


def cmd_bench(args) -> int:
    params, qmodel = _load(args)
    h, w = args.size
    r = experiments.benchmark(params, h, w, runs=args.runs, warmup=args.warmup, qmodel=qmodel)
    print("size,runs,mean_ms,min_ms,max_ms")
    print(f"{h}x{w},{r['runs']},{r['mean_ms']:.3f},{r['min_ms']:.3f},{r['max_ms']:.3f}")
    return 0


def cmd_ablate(args) -> int:
    rc = RunConfig.load(args.config)
    train_set, test_set = rc.datasets()
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [rc.train.seed]
    rows = experiments.run_ablation(rc.model, rc.train, train_set, test_set, seeds=seeds,
                                    log=lambda r: log.info("%s", r))
    text = experiments.ablation_csv(rows)
    rc.out_dir.mkdir(parents=True, exist_ok=True)
    (rc.out_dir / "ablation.csv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_gradcheck(args) -> int:
    return 0 if gradcheck.run_all(verbose=True) else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swrn", description="Sliding-window recurrent x4 video SR")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", help="bicubic-downsample HR clips and write a manifest")
    s.add_argument("--hr", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--scale", type=int, default=4)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", help="train from a RunConfig JSON")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("infer", help="super-resolve one LR clip directory")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--quantized", action="store_true")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("eval", help="PSNR report over a manifest")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out")
    s.add_argument("--quantized", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("quantize", help="INT8 post-training quantization")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--calib", required=True, help="manifest JSON or one LR clip directory")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("bench", help="host wall-clock latency per frame")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--size", type=_parse_size, required=True, help="LR frame size HxW")
    s.add_argument("--runs", type=int, default=10)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("--quantized", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("ablate", help="train baseline / sliding_window / full and compare")
    s.add_argument("--config", required=True)
    s.add_argument("--seeds", help="comma-separated seeds (default: config seed)")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference self-test")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "runs", 1) < 1:
        parser.error("--runs must be >= 1")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except SWRNError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
