"""Versioned binary checkpoint container.

Layout (all integers little-endian)::

    b"SPSR"            magic
    u16                format version (1)
    u32 + bytes        ModelConfig as UTF-8 JSON
    u32 + bytes        metadata as UTF-8 JSON (epoch, step, seed, ...)
    u32                tensor count
    per tensor:
      u16 + bytes      name (UTF-8)
      u8               dtype code: 0 float32, 1 float64, 2 uint8, 3 int64
      u8               ndim
      u32 * ndim       extents
      raw values       little-endian, C order

Model tensors are stored under ``model.<name>``; the trainer adds optimizer
moments and random-generator states under other prefixes.
"""
from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SPSR"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_TORCH = {torch.float32: 0, torch.float64: 1, torch.uint8: 2, torch.int64: 3}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: str
    meta: dict = field(default_factory=dict)
    tensors: dict[str, torch.Tensor] = field(default_factory=dict)


def _encode(tensors: dict[str, torch.Tensor], precision: str) -> bytes:
    buf = io.BytesIO()
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        t = t.detach().cpu()
        if t.is_floating_point():
            t = t.to(torch.float64 if precision == "f64" else torch.float32)
        if t.dtype not in _TORCH:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        code = _TORCH[t.dtype]
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<BB", code, t.dim()))
        buf.write(struct.pack(f"<{t.dim()}I", *t.shape))
        buf.write(t.contiguous().numpy().astype(_CODES[code], copy=False).tobytes())
    return buf.getvalue()


def dumps(ckpt: Checkpoint, precision: str = "f32") -> bytes:
    if precision not in ("f32", "f64"):
        raise ValueError("precision is 'f32' or 'f64'")
    cfg = ckpt.config.encode()
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    head = MAGIC + struct.pack("<H", VERSION)
    head += struct.pack("<I", len(cfg)) + cfg + struct.pack("<I", len(meta)) + meta
    return head + _encode(ckpt.tensors, precision)


def loads(data: bytes) -> Checkpoint:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        out = view[pos : pos + n]
        pos += n
        return out

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("not a SpikeSR checkpoint (bad magic)")
    (version,) = struct.unpack("<H", take(2))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = struct.unpack("<I", take(4))
    config = bytes(take(n)).decode()
    (n,) = struct.unpack("<I", take(4))
    meta = json.loads(bytes(take(n)).decode())
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode()
        code, ndim = struct.unpack("<BB", take(2))
        if code not in _CODES:
            raise CheckpointError(f"unknown dtype code {code} for {name}")
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        dt = _CODES[code]
        size = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(bytes(take(size)), dtype=dt).reshape(shape)
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(view):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(config, meta, tensors)


def write_atomic(path: str | os.PathLike, data: bytes) -> None:
    """Write to a temporary file beside ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def model_tensors(model: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {f"model.{k}": v for k, v in model.state_dict().items()}


def save(path: str | os.PathLike, model, meta: dict | None = None,
         extra: dict[str, torch.Tensor] | None = None, precision: str = "f32") -> None:
    tensors = model_tensors(model)
    tensors.update(extra or {})
    write_atomic(path, dumps(Checkpoint(model.cfg.to_json(), meta or {}, tensors), precision))


def read(path: str | os.PathLike) -> Checkpoint:
    return loads(Path(path).read_bytes())


def load_model(path: str | os.PathLike, dtype: torch.dtype | None = None):
    """Rebuild the model stored at ``path``; returns (model, checkpoint)."""
    from .model import ModelConfig, SpikeSR

    ckpt = read(path)
    model = SpikeSR(ModelConfig.from_json(ckpt.config))
    dtype = dtype or torch.get_default_dtype()
    state = {k[len("model."):]: v.to(dtype) if v.is_floating_point() else v
             for k, v in ckpt.tensors.items() if k.startswith("model.")}
    model.load_state_dict(state)
    model.to(dtype)
    return model, ckpt
