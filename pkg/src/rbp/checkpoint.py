"""Self-contained binary checkpoints.

Little-endian layout, fully specified so round trips are bit-identical:

    magic    8 bytes  b"RBPCKPT1"
    meta     u32 length + canonical JSON (sorted keys, compact separators)
    tensors  u32 count, then per tensor:
             u16 name length + UTF-8 name, u8 dtype code (0=f32, 1=f64),
             u8 ndim, ndim * u32 dims, raw little-endian data
    gates    u32 count, then per gate:
             u16 id length + UTF-8 id, u8 status code (0 active, 1 frozen,
             2 folded), f64 prior variance, u32 channels, channels * f64 rates

The metadata JSON carries the architecture, so a checkpoint reconstructs
its model without the original config.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gate import ACTIVE, FOLDED, FROZEN, GateState
from .model import Architecture, Model, arch_from_dict, arch_to_dict
from .optim import ParamStore

MAGIC = b"RBPCKPT1"
_DTYPE_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_STATUS_CODES = {ACTIVE: 0, FROZEN: 1, FOLDED: 2}
_CODE_STATUS = {v: k for k, v in _STATUS_CODES.items()}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    arch: Architecture
    tensors: dict[str, np.ndarray]
    gates: list[GateState] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def to_model(self) -> Model:
        params = ParamStore()
        for name, arr in self.tensors.items():
            params.add(name, arr.copy())
        dtype = next(iter(self.tensors.values())).dtype if self.tensors else np.float32
        return Model(self.arch, params, dtype=dtype)


def checkpoint_bytes(model: Model, gates=(), meta: dict | None = None) -> bytes:
    meta = dict(meta or {})
    meta.setdefault("format", 1)
    meta["architecture"] = arch_to_dict(model.arch)
    meta_blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")

    out = [MAGIC, struct.pack("<I", len(meta_blob)), meta_blob]
    tensors = model.params.tensors
    out.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        if arr.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {arr.dtype}")
        blob = name.encode("utf-8")
        out.append(struct.pack("<H", len(blob)))
        out.append(blob)
        out.append(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    gates = list(gates)
    out.append(struct.pack("<I", len(gates)))
    for g in gates:
        blob = g.layer_id.encode("utf-8")
        out.append(struct.pack("<H", len(blob)))
        out.append(blob)
        out.append(struct.pack("<Bd", _STATUS_CODES[g.status], g.prior_variance))
        out.append(struct.pack("<I", g.channels))
        out.append(np.ascontiguousarray(g.rates, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(path, model: Model, gates=(), meta: dict | None = None) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(checkpoint_bytes(model, gates, meta))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated reading {what} at offset "
                                  f"{self.pos}")
        out = self.blob[self.pos:self.pos + count]
        self.pos += count
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"missing checkpoint {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise CheckpointError(f"{path}: bad magic; not a checkpoint of this format")
    (meta_len,) = r.unpack("<I", "meta length")
    meta = json.loads(r.take(meta_len, "metadata").decode("utf-8"))
    if "architecture" not in meta:
        raise CheckpointError(f"{path}: metadata lacks an architecture")
    arch = arch_from_dict(meta["architecture"])

    tensors: dict[str, np.ndarray] = {}
    (n_tensors,) = r.unpack("<I", "tensor count")
    for _ in range(n_tensors):
        (name_len,) = r.unpack("<H", "tensor name length")
        name = r.take(name_len, "tensor name").decode("utf-8")
        code, ndim = r.unpack("<BB", "tensor header")
        if code not in _CODE_DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code} for {name!r}")
        dims = r.unpack(f"<{ndim}I", "tensor dims")
        dtype = _CODE_DTYPES[code]
        count = int(np.prod(dims)) if dims else 1
        raw = r.take(count * dtype.itemsize, f"tensor {name!r} data")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
        tensors[name] = arr

    gates: list[GateState] = []
    (n_gates,) = r.unpack("<I", "gate count")
    for _ in range(n_gates):
        (id_len,) = r.unpack("<H", "gate id length")
        layer_id = r.take(id_len, "gate id").decode("utf-8")
        status_code, prior_variance = r.unpack("<Bd", "gate header")
        (channels,) = r.unpack("<I", "gate channels")
        raw = r.take(channels * 8, f"gate {layer_id!r} rates")
        rates = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        gates.append(GateState(layer_id, rates, prior_variance,
                               status=_CODE_STATUS[status_code]))
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: {len(r.blob) - r.pos} trailing bytes at offset "
                              f"{r.pos}")
    return Checkpoint(arch=arch, tensors=tensors, gates=gates, meta=meta)
