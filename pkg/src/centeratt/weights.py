"""Weight-store container and the ``CATW`` binary file format.

Byte layout (all integers little-endian)::

    offset  size  field
    0       4     magic b"CATW"
    4       4     version (u32, currently 1)
    8       4     entry count (u32)
    -- per entry, in store order --
            2     name length in bytes (u16)
            n     name, UTF-8
            1     rank (u8)
            4*r   dims (u32 each, outermost first)
            1     precision (u8): 0 = fp32, 1 = fp16
            ...   prod(dims) values, row-major; float32 (4 bytes) or binary16 (2 bytes)

A weight store is a plain ``dict`` mapping dotted names to :class:`Tensor`.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Dict

import numpy as np

from .errors import WeightFileError
from .tensor import Precision, Tensor

MAGIC = b"CATW"
VERSION = 1

WeightStore = Dict[str, Tensor]


def dump_weights(store: WeightStore) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(store)))
    for name, t in store.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise WeightFileError(f"tensor name too long: {name[:40]}...")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.shape))
        if t.precision is Precision.FP16E:
            buf.write(b"\x01")
            buf.write(t.data.astype("<f2").tobytes())
        else:
            buf.write(b"\x00")
            buf.write(t.data.astype("<f4").tobytes())
    return buf.getvalue()


def load_weights(blob: bytes) -> WeightStore:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise WeightFileError("not a CATW weight file (bad magic)")
    try:
        version, count = struct.unpack_from("<II", view, 4)
        if version != VERSION:
            raise WeightFileError(f"unsupported weight file version {version}")
        pos = 12
        store: WeightStore = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos:pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            (prec,) = struct.unpack_from("<B", view, pos)
            pos += 1
            n = int(np.prod(dims)) if rank else 1
            if prec == 0:
                data = np.frombuffer(view, dtype="<f4", count=n, offset=pos)
                pos += 4 * n
                precision = Precision.FP32
            elif prec == 1:
                data = np.frombuffer(view, dtype="<f2", count=n, offset=pos).astype(np.float32)
                pos += 2 * n
                precision = Precision.FP16E
            else:
                raise WeightFileError(f"unknown precision code {prec} for {name}")
            store[name] = Tensor(data.reshape(dims), precision)
    except (struct.error, ValueError) as exc:
        raise WeightFileError(f"truncated or corrupt weight file: {exc}") from exc
    if pos != len(blob):
        raise WeightFileError(f"{len(blob) - pos} trailing bytes after last entry")
    return store


def write_weights(path, store: WeightStore) -> None:
    Path(path).write_bytes(dump_weights(store))


def read_weights(path) -> WeightStore:
    return load_weights(Path(path).read_bytes())
