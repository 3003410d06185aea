"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CINW1\\n"
    u32 tensor count
    per tensor: u32 name length, UTF-8 name, u8 dtype (0=f32, 1=f64),
                u32 rank, rank x u32 dims, raw little-endian scalars
    u32 metadata length, UTF-8 JSON metadata

Optimizer velocity buffers are stored as ordinary tensors under the
``velocity/`` prefix so a run can resume exactly where it stopped.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .activations import parse_activation
from .network import Network, build, set_slot

MAGIC = b"CINW1\n"
FORMAT_VERSION = 1
VELOCITY_PREFIX = "velocity/"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    architecture: str
    slots: dict
    params: dict
    velocity: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_network(cls, net: Network, velocity=None, **meta) -> "Checkpoint":
        return cls(net.name, net.slot_encodings(),
                   {n: np.array(t.data) for n, t in net.params.items()},
                   {n: np.array(v) for n, v in (velocity or {}).items()}, dict(meta))

    def to_network(self) -> Network:
        dtypes = {a.dtype for a in self.params.values()}
        net = build(self.architecture, dtype=dtypes.pop() if len(dtypes) == 1 else np.float32)
        for site, enc in self.slots.items():
            set_slot(net, site, parse_activation(enc))
        if set(net.params) != set(self.params):
            extra = sorted(set(self.params) ^ set(net.params))
            raise CheckpointError(f"parameter set mismatch for {self.architecture}: {extra}")
        for name, t in net.params.items():
            t.assign(self.params[name])
        return net


def save(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(dumps(ckpt))


def dumps(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    tensors = list(ckpt.params.items()) + [(VELOCITY_PREFIX + n, v) for n, v in ckpt.velocity.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        code = _DTYPE_CODES[arr.dtype]
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BI", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_CODE_DTYPES[code]).tobytes())
    meta = dict(ckpt.meta)
    meta.update(format_version=FORMAT_VERSION, architecture=ckpt.architecture, slots=ckpt.slots)
    raw_meta = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(raw_meta)))
    buf.write(raw_meta)
    return buf.getvalue()


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        return loads(path.read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None


def loads(raw: bytes) -> Checkpoint:
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"bad magic {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError("truncated checkpoint")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    params, velocity = {}, {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BI", take(5))
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        dt = _CODE_DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(take(n * dt.itemsize), dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        if name.startswith(VELOCITY_PREFIX):
            velocity[name[len(VELOCITY_PREFIX):]] = arr
        else:
            params[name] = arr
    (meta_len,) = struct.unpack("<I", take(4))
    meta = json.loads(take(meta_len).decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported format version {meta.get('format_version')}")
    arch = meta.pop("architecture")
    slots = meta.pop("slots")
    meta.pop("format_version")
    return Checkpoint(arch, slots, params, velocity, meta)
