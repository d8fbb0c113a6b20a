"""Binary checkpoint format (magic "GCKP").

Byte layout, all integers and floats little-endian:

    offset 0   magic          4 bytes  b"GCKP"
    offset 4   version        u16      currently 1
    offset 6   config_len     u32
    offset 10  config         UTF-8 JSON blob of config_len bytes
    then       record_count   u32
    records    name_len u16, name UTF-8, rank u8, dims u32 x rank,
               values f64 x prod(dims)

The JSON blob carries the run configuration (encoder scales, seed, modality
input dims, ...) so encoders and fixed spectral banks regenerate identically
on load.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Sequence, Tuple

import numpy as np

from .errors import DataError
from .io_utils import atomic_write_bytes
from .tensor import Parameter

MAGIC = b"GCKP"
VERSION = 1


def serialize_checkpoint(config: dict, params: Sequence[Parameter]) -> bytes:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<H", VERSION)
    out += struct.pack("<I", len(blob))
    out += blob
    out += struct.pack("<I", len(params))
    for p in params:
        name = p.name.encode("utf-8")
        out += struct.pack("<H", len(name))
        out += name
        arr = np.asarray(p.value, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        out += struct.pack("<B", arr.ndim)
        for d in arr.shape:
            out += struct.pack("<I", d)
        out += arr.tobytes()
    return bytes(out)


def write_checkpoint(path: str, config: dict, params: Sequence[Parameter]):
    atomic_write_bytes(path, serialize_checkpoint(config, params))


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(
                f"{self.what}: truncated at byte {self.pos} (needed {n} more)"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def read_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    """Load (config, {name: float64 array}) from a GCKP file."""
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data, path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: bad magic at byte 0 (not a GCKP file)")
    version = r.unpack("<H")
    if version != VERSION:
        raise DataError(f"{path}: unsupported GCKP version {version}")
    config = json.loads(r.take(r.unpack("<I")).decode("utf-8"))
    count = r.unpack("<I")
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.unpack("<H")).decode("utf-8")
        rank = r.unpack("<B")
        shape = tuple(r.unpack("<I") for _ in range(rank))
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).copy()
        arrays[name] = arr
    if r.pos != len(data):
        raise DataError(f"{path}: {len(data) - r.pos} trailing bytes at byte {r.pos}")
    return config, arrays


def assign_parameters(params: Sequence[Parameter], arrays: Dict[str, np.ndarray]):
    """Copy loaded arrays into parameters, matching by name."""
    by_name = {p.name: p for p in params}
    missing = [n for n in by_name if n not in arrays]
    if missing:
        raise DataError(f"checkpoint missing parameters: {sorted(missing)[:5]}")
    for name, p in by_name.items():
        arr = arrays[name]
        if arr.shape != p.value.shape:
            raise DataError(
                f"checkpoint shape mismatch for {name}: {arr.shape} vs {p.value.shape}"
            )
        p.value[...] = arr
