"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"SWRN"                      magic
    u32 version                  currently 1
    u32 n, n bytes               model config as UTF-8 JSON
    f32[...]                     weights then bias of every layer, in wiring order
    u32 has_quant                0 or 1
    [u32 n, n bytes              scale table as UTF-8 JSON
     i8[...]                     int8 weights of every layer
     i32[...]]                   int32 biases of every layer
    u32 crc32                    over all preceding bytes
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from . import model
from .errors import ChecksumError, FormatError
from .ops import ConvKernel
from .quant import QuantKernel, QuantModel

MAGIC = b"SWRN"
VERSION = 1
_U32 = struct.Struct("<I")


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def to_bytes(params: model.Parameters, qmodel=None) -> bytes:
    out = bytearray(MAGIC)
    out += _U32.pack(VERSION)
    cfg = _json_bytes(params.config.to_dict())
    out += _U32.pack(len(cfg)) + cfg
    for _, arr in params.arrays():
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    if qmodel is None:
        out += _U32.pack(0)
    else:
        if qmodel.config != params.config:
            raise FormatError("quantized model config differs from float parameters")
        table = {"layers": {n: {"weight_scale": k.weight_scale, "input_scale": k.input_scale}
                            for n, k in qmodel.kernels.items()},
                 "act": dict(qmodel.act_scales)}
        tb = _json_bytes(table)
        out += _U32.pack(1) + _U32.pack(len(tb)) + tb
        for k in qmodel.kernels.values():
            out += np.ascontiguousarray(k.q_weight, dtype="i1").tobytes()
        for k in qmodel.kernels.values():
            out += np.ascontiguousarray(k.q_bias, dtype="<i4").tobytes()
    out += _U32.pack(zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("checkpoint truncated")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def array(self, dtype, shape):
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        return np.frombuffer(self.take(n), dtype=dtype).reshape(shape).astype(np.dtype(dtype).newbyteorder("="))


def from_bytes(buf: bytes):
    """Parse a checkpoint; returns ``(params, qmodel_or_None)``."""
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)")
    stored = _U32.unpack(buf[-4:])[0]
    if zlib.crc32(buf[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("checkpoint CRC mismatch")
    r = _Reader(buf[:-4])
    r.take(4)
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    try:
        cfg = model.ModelConfig(**json.loads(r.take(r.u32()).decode("utf-8")))
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad model config record: {exc}") from None
    shapes = model.layer_shapes(cfg)
    implied = 4 * model.expected_param_count(cfg)
    remaining = len(r.buf) - r.pos
    if remaining < implied + 4:
        raise FormatError(f"payload is {remaining} bytes, config implies {implied} + trailer")
    kernels = {}
    for name, (cin, cout) in shapes.items():
        w = r.array("<f4", (cout, cin, 3, 3))
        b = r.array("<f4", (cout,))
        kernels[name] = ConvKernel(w, b)
    params = model.Parameters(cfg, kernels)
    flag = r.u32()
    qmodel = None
    if flag == 1:
        table = json.loads(r.take(r.u32()).decode("utf-8"))
        qw = {n: r.array("i1", (cout, cin, 3, 3)) for n, (cin, cout) in shapes.items()}
        qb = {n: r.array("<i4", (cout,)) for n, (cin, cout) in shapes.items()}
        qk = {n: QuantKernel(qw[n], float(table["layers"][n]["weight_scale"]), qb[n],
                             float(table["layers"][n]["input_scale"])) for n in shapes}
        qmodel = QuantModel(cfg, qk, {k: float(v) for k, v in table["act"].items()})
    elif flag != 0:
        raise FormatError(f"bad quantized-section flag {flag}")
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} unexpected trailing bytes")
    return params, qmodel


def save_checkpoint(path, params, qmodel=None):
    Path(path).write_bytes(to_bytes(params, qmodel))


def load_checkpoint(path):
    return from_bytes(Path(path).read_bytes())
