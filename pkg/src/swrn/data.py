"""Clip I/O, bicubic x4 degradation, PSNR and synthetic clips."""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from PIL import Image

from . import recurrence
from .errors import ConfigurationError, ContractViolation, FormatError, ManifestError

FRAME_PATTERN = "frame_{:08d}.png"
_FRAME_RE = re.compile(r"^frame_(\d{8})\.png$")
SCALE = 4


@dataclass
class FrameSequence:
    """Ordered frames of one clip, each ``(1, 3, H, W)`` float32 in [0, 1]."""

    frames: list
    clip_id: str = ""
    fps: float | None = None

    def __post_init__(self):
        if not self.frames:
            raise ContractViolation("a FrameSequence needs at least one frame")
        shape = self.frames[0].shape
        if len(shape) != 4 or shape[:2] != (1, 3):
            raise ContractViolation(f"frames must be (1, 3, H, W), got {shape}")
        for i, f in enumerate(self.frames):
            if f.shape != shape:
                raise ContractViolation(f"frame {i} has shape {f.shape}, expected {shape}")

    def __len__(self):
        return len(self.frames)

    @property
    def shape(self):
        return self.frames[0].shape

    def stack(self) -> np.ndarray:
        """``(T, 3, H, W)`` array."""
        return np.concatenate(self.frames, axis=0)

    @classmethod
    def from_array(cls, arr: np.ndarray, clip_id: str = "") -> "FrameSequence":
        return cls([np.ascontiguousarray(a[None], dtype=np.float32) for a in arr], clip_id)


@dataclass
class ClipPair:
    """Aligned LR/HR frames of one clip as ``(T, 3, h, w)`` / ``(T, 3, 4h, 4w)`` arrays."""

    clip_id: str
    lr: np.ndarray
    hr: np.ndarray

    def __post_init__(self):
        if self.lr.shape[0] != self.hr.shape[0]:
            raise ManifestError(f"clip {self.clip_id}: {self.lr.shape[0]} LR vs {self.hr.shape[0]} HR frames")
        if self.hr.shape[2:] != (SCALE * self.lr.shape[2], SCALE * self.lr.shape[3]):
            raise ManifestError(f"clip {self.clip_id}: HR {self.hr.shape[2:]} is not 4x LR {self.lr.shape[2:]}")


@dataclass
class ManifestEntry:
    clip_id: str
    lr: Path
    hr: Path
    frames: int


@dataclass
class DatasetManifest:
    clips: list = field(default_factory=list)
    scale: int = SCALE

    def to_json(self, base: Path | None = None) -> str:
        def rel(p):
            p = Path(p)
            if base is not None:
                try:
                    return os.path.relpath(p, base)
                except ValueError:
                    pass
            return str(p)
        doc = {"scale": self.scale,
               "clips": [{"id": c.clip_id, "lr": rel(c.lr), "hr": rel(c.hr), "frames": c.frames}
                         for c in self.clips]}
        return json.dumps(doc, indent=2) + "\n"


# -- frame files -----------------------------------------------------------

def to_uint8(x: np.ndarray) -> np.ndarray:
    """[0, 1] reals to 8-bit with round-half-away-from-zero."""
    return np.floor(np.clip(x, 0.0, 1.0).astype(np.float64) * 255.0 + 0.5).astype(np.uint8)


def from_uint8(a: np.ndarray) -> np.ndarray:
    return (a.astype(np.float32) / np.float32(255.0)).astype(np.float32)


def _frame_indices(directory: Path) -> list:
    if not directory.is_dir():
        raise ManifestError(f"{directory} is not a directory")
    idx = sorted(int(m.group(1)) for m in map(_FRAME_RE.match, os.listdir(directory)) if m)
    if not idx:
        raise ManifestError(f"{directory} contains no frame_%08d.png files")
    missing = sorted(set(range(idx[-1] + 1)) - set(idx))
    if missing:
        raise ManifestError(f"{directory}: missing frame indices {missing}")
    return idx


def read_frame(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "RGB":
            raise FormatError(f"{path}: expected 8-bit RGB PNG, got mode {im.mode}")
        a = np.asarray(im)
    return from_uint8(a).transpose(2, 0, 1)[None]


def write_frame(path: Path, frame: np.ndarray):
    a = to_uint8(frame[0]).transpose(1, 2, 0)
    Image.fromarray(np.ascontiguousarray(a), mode="RGB").save(path, format="PNG")


def load_clip(directory) -> FrameSequence:
    directory = Path(directory)
    frames = [read_frame(directory / FRAME_PATTERN.format(i)) for i in _frame_indices(directory)]
    shapes = {f.shape for f in frames}
    if len(shapes) != 1:
        raise ManifestError(f"{directory}: frames have differing sizes {sorted(shapes)}")
    return FrameSequence(frames, clip_id=directory.name)


def save_clip(seq: FrameSequence, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(seq.frames):
        write_frame(directory / FRAME_PATTERN.format(i), f)


def quantize_8bit(x: np.ndarray) -> np.ndarray:
    """Snap values onto the 8-bit grid used by the frame files."""
    return from_uint8(to_uint8(x))


# -- manifests -------------------------------------------------------------

def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from None
    if set(doc) - {"scale", "clips"} or "clips" not in doc:
        raise ManifestError(f"{path}: manifest must have keys 'scale' and 'clips'")
    scale = doc.get("scale", SCALE)
    if scale != SCALE:
        raise ManifestError(f"{path}: only scale 4 is supported, got {scale}")
    base = path.parent
    entries = []
    for c in doc["clips"]:
        try:
            e = ManifestEntry(str(c["id"]), base / c["lr"], base / c["hr"], int(c["frames"]))
        except KeyError as exc:
            raise ManifestError(f"{path}: clip entry missing {exc}") from None
        for d in (e.lr, e.hr):
            n = len(_frame_indices(d))
            if n != e.frames:
                raise ManifestError(f"{d}: manifest lists {e.frames} frames, directory has {n}")
        entries.append(e)
    return DatasetManifest(entries, scale)


def load_dataset(manifest: DatasetManifest) -> list:
    pairs = []
    for e in manifest.clips:
        lr, hr = load_clip(e.lr).stack(), load_clip(e.hr).stack()
        pairs.append(ClipPair(e.clip_id, lr, hr))
    return pairs


# -- bicubic degradation ---------------------------------------------------

def cubic(x, a: float = -0.5):
    """Keys cubic convolution kernel."""
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    return np.where(x <= 1, (a + 2) * x3 - (a + 3) * x2 + 1,
                    np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0))


@lru_cache(maxsize=32)
def bicubic_matrix(n: int, scale: int = SCALE) -> np.ndarray:
    """``(n // scale, n)`` anti-aliased bicubic decimation matrix, edges clamped."""
    out = n // scale
    support = 2.0 * scale
    m = np.zeros((out, n))
    for j in range(out):
        centre = (j + 0.5) * scale - 0.5
        taps = np.arange(math.floor(centre - support) + 1, math.ceil(centre + support))
        w = cubic((taps - centre) / scale)
        w /= w.sum()
        np.add.at(m[j], np.clip(taps, 0, n - 1), w)
    return m


def bicubic_downsample_x4(hr: np.ndarray) -> np.ndarray:
    if hr.ndim != 4:
        raise ContractViolation(f"expected NCHW array, got shape {hr.shape}")
    h, w = hr.shape[2:]
    if h % SCALE or w % SCALE:
        raise ContractViolation(f"HR size {h}x{w} is not divisible by {SCALE}; crop first")
    mh, mw = bicubic_matrix(h), bicubic_matrix(w)
    out = np.einsum("ph,bchw,qw->bcpq", mh, hr.astype(np.float64), mw, optimize=True)
    return out.astype(hr.dtype if hr.dtype.kind == "f" else np.float32)


# -- metrics ---------------------------------------------------------------

def psnr(pred: np.ndarray, ref: np.ndarray) -> float:
    """PSNR in dB for [0, 1] data; ``inf`` when the images are identical."""
    if pred.shape != ref.shape:
        raise ContractViolation(f"psnr shape mismatch {pred.shape} vs {ref.shape}")
    d = np.clip(pred, 0, 1).astype(np.float64) - np.clip(ref, 0, 1).astype(np.float64)
    mse = float(np.mean(d * d))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


# -- synthetic clips -------------------------------------------------------

SYNTH_KINDS = ("moving_gradient", "scrolling_text", "bouncing_rect")
_SUPER = 4  # supersampling factor; motion is quantised to 1/_SUPER HR pixel


def _box_down(img: np.ndarray, f: int) -> np.ndarray:
    c, h, w = img.shape
    return img.reshape(c, h // f, f, w // f, f).mean(axis=(2, 4))


def _glyph_canvas(rng, h, w):
    canvas = np.empty((3, h, w))
    bg = rng.uniform(0.75, 1.0, 3)
    canvas[:] = bg[:, None, None]
    bit = int(rng.integers(3, 5)) * _SUPER  # glyph dot size: 3-4 HR pixels
    gh, gw = 7 * bit, 5 * bit
    cell = 2 * bit
    y = int(rng.integers(0, cell))
    while y + gh <= h:
        ink = rng.uniform(0.0, 0.35, 3)
        x = int(rng.integers(0, cell))
        while x + gw <= w:
            if rng.random() < 0.85:
                bits = rng.random((7, 5)) < 0.45
                mask = np.kron(bits, np.ones((bit, bit))).astype(bool)
                canvas[:, y:y + gh, x:x + gw][:, mask] = ink[:, None]
            x += gw + cell
        y += gh + cell
    return canvas


def synth_clip(kind: str, frames: int, size: int, seed: int) -> FrameSequence:
    """Deterministic HR clip (``size`` x ``size``) with sub-pixel motion between frames."""
    if kind not in SYNTH_KINDS:
        raise ContractViolation(f"unknown synthetic clip kind {kind!r}; expected {SYNTH_KINDS}")
    if frames < 1 or size % SCALE or size < SCALE:
        raise ContractViolation("need frames >= 1 and size divisible by 4")
    rng = np.random.default_rng(seed)
    # velocity in supersampled pixels per frame: never zero, never a multiple of the supersample grid
    vel = rng.choice([-7, -5, -3, 3, 5, 7], size=2) * rng.integers(1, 3, size=2)
    out = []
    if kind == "moving_gradient":
        yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
        base = rng.uniform(0.2, 0.8, 3)
        slope = rng.uniform(-0.3, 0.3, (3, 2)) / size
        waves = [(rng.uniform(0.01, 0.16) * 2 * np.pi * np.array([np.cos(a), np.sin(a)]),
                  rng.uniform(0, 2 * np.pi), rng.uniform(0.04, 0.12, 3))
                 for a in rng.uniform(0, np.pi, 6)]
        for t in range(frames):
            sy, sx = vel * t / _SUPER
            py, px = yy - sy, xx - sx
            img = base[:, None, None] + slope[:, 0, None, None] * py + slope[:, 1, None, None] * px
            for k, phase, amp in waves:
                img = img + amp[:, None, None] * np.sin(k[0] * py + k[1] * px + phase)
            out.append(img)
    else:
        pad = int(np.abs(vel).max()) * frames + _SUPER
        span = size * _SUPER + 2 * pad
        if kind == "scrolling_text":
            canvas = _glyph_canvas(rng, span, span)
            for t in range(frames):
                oy, ox = pad - vel[0] * t, pad - vel[1] * t
                out.append(_box_down(canvas[:, oy:oy + size * _SUPER, ox:ox + size * _SUPER], _SUPER))
        else:
            block = int(rng.integers(4, 7)) * _SUPER
            background = np.kron(rng.uniform(0.3, 0.7, (3, span // block + 1, span // block + 1)),
                                 np.ones((1, block, block)))[:, :span, :span]
            n_rect = int(rng.integers(2, 5))
            side = size * _SUPER
            rects = []
            for _ in range(n_rect):
                rh, rw = rng.integers(side // 8, side // 3, size=2)
                pos = np.array([rng.integers(0, side - rh), rng.integers(0, side - rw)])
                v = rng.choice([-9, -7, -5, 5, 7, 9], size=2)
                rects.append((int(rh), int(rw), pos, v, rng.uniform(0, 1, 3)))
            for t in range(frames):
                oy, ox = pad - vel[0] * t, pad - vel[1] * t
                img = background[:, oy:oy + side, ox:ox + side].copy()
                for rh, rw, pos, v, colour in rects:
                    p = _bounce(pos, v, t, np.array([side - rh, side - rw]))
                    img[:, p[0]:p[0] + rh, p[1]:p[1] + rw] = colour[:, None, None]
                out.append(_box_down(img, _SUPER))
    arr = np.clip(np.stack(out), 0.0, 1.0).astype(np.float32)
    return FrameSequence.from_array(arr, clip_id=f"{kind}_{seed}")


def _bounce(pos, v, t, limit):
    p = pos + v * t
    period = 2 * limit
    p = np.mod(p, np.maximum(period, 1))
    return np.where(p > limit, period - p, p).astype(int)


def synth_pair(kind: str, frames: int, lr_size: int, seed: int, quantize: bool = True) -> ClipPair:
    """Synthetic HR clip plus its bicubic LR version, optionally snapped to 8 bits."""
    hr = synth_clip(kind, frames, lr_size * SCALE, seed).stack()
    if quantize:
        hr = quantize_8bit(hr)
    lr = bicubic_downsample_x4(hr)
    if quantize:
        lr = quantize_8bit(lr)
    return ClipPair(f"{kind}_{seed}", lr, hr)


def synth_dataset(n_clips: int, frames: int, lr_size: int, seed: int, kinds=SYNTH_KINDS) -> list:
    return [synth_pair(kinds[i % len(kinds)], frames, lr_size, seed * 1000 + i) for i in range(n_clips)]


# -- evaluation ------------------------------------------------------------

@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # (clip_id, frames, mean_psnr_db), sorted by id
    total_frames: int = 0
    mean_psnr: float = float("nan")

    def csv(self) -> str:
        lines = ["clip_id,frames,mean_psnr_db"]
        lines += [f"{cid},{n},{p:.4f}" for cid, n, p in self.rows]
        lines.append(f"ALL,{self.total_frames},{self.mean_psnr:.4f}")
        return "\n".join(lines) + "\n"


def evaluate(params, manifest, runner=None) -> EvalReport:
    """Per-clip and dataset-mean PSNR of the full LR clips against HR.

    ``manifest`` is a :class:`DatasetManifest` or a list of :class:`ClipPair`.
    ``runner(params, frames)`` returns a ClipRun; defaults to float inference.
    """
    if runner is None:
        runner = lambda p, frames: recurrence.run_clip(p, frames, "infer")  # noqa: E731
    pairs = load_dataset(manifest) if isinstance(manifest, DatasetManifest) else list(manifest)
    if not pairs:
        raise ConfigurationError("nothing to evaluate: manifest has no clips")
    rows = []
    for pair in pairs:
        frames = [pair.lr[i:i + 1] for i in range(pair.lr.shape[0])]
        try:
            run = runner(params, frames)
        except ContractViolation as exc:
            raise ConfigurationError(f"clip {pair.clip_id} incompatible with model: {exc}") from None
        scores = [psnr(np.clip(y, 0, 1), pair.hr[i:i + 1]) for i, y in enumerate(run.outputs)]
        rows.append((pair.clip_id, len(scores), float(np.mean(scores))))
    rows.sort(key=lambda r: r[0])
    return EvalReport(rows, sum(r[1] for r in rows), float(np.mean([r[2] for r in rows])))
