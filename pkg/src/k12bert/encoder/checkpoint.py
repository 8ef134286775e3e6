"""K12C binary checkpoint format.

Layout (little-endian): magic ``K12C``, u32 version, u32 length + UTF-8 JSON
metadata block (encoder config, global step, epochs done, optimizer step),
u32 tensor count, then per tensor: u16 name length, name, u8 rank, u32 dims,
f32 data. Optimizer moments, when present, are stored as ordinary tensors
named ``optimizer.m/<param>`` and ``optimizer.v/<param>``.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .params import EncoderConfig, ModelParams, param_shapes

MAGIC = b"K12C"
VERSION = 1
M_PREFIX = "optimizer.m/"
V_PREFIX = "optimizer.v/"


class CheckpointError(ValueError):
    pass


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(0, {k: np.zeros_like(t) for k, t in params.items()}, {k: np.zeros_like(t) for k, t in params.items()})


@dataclass
class Checkpoint:
    params: ModelParams
    global_step: int = 0
    epoch: int = 0
    optimizer: AdamState | None = None

    @property
    def config(self) -> EncoderConfig:
        return self.params.config


def save_checkpoint(ckpt: Checkpoint | ModelParams, path: str | Path) -> None:
    if isinstance(ckpt, ModelParams):
        ckpt = Checkpoint(ckpt)
    meta = {
        "config": ckpt.config.to_dict(),
        "global_step": ckpt.global_step,
        "epoch": ckpt.epoch,
        "optimizer_step": ckpt.optimizer.step if ckpt.optimizer else None,
    }
    tensors = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        tensors += [(M_PREFIX + k, t) for k, t in ckpt.optimizer.m.items()]
        tensors += [(V_PREFIX + k, t) for k, t in ckpt.optimizer.v.items()]

    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(meta_bytes)))
        f.write(meta_bytes)
        f.write(struct.pack("<I", len(tensors)))
        for name, t in tensors:
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.ndim))
            f.write(struct.pack(f"<{t.ndim}I", *t.shape))
            f.write(np.ascontiguousarray(t, dtype="<f4").tobytes())
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.off, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.data):
            raise CheckpointError(f"{self.path}: truncated file (wanted {n} bytes at offset {self.off})")
        b = self.data[self.off:self.off + n]
        self.off += n
        return b

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes(), path)
    magic = r.take(4)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    version, meta_len = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        config = EncoderConfig.from_dict(meta["config"])
    except (ValueError, KeyError, TypeError) as e:
        raise CheckpointError(f"{path}: bad metadata block ({e})") from e

    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        tensors[name] = data
    if r.off != len(r.data):
        raise CheckpointError(f"{path}: {len(r.data) - r.off} trailing bytes")

    shapes = param_shapes(config)
    for name, shape in shapes.items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name!r}")
        if tensors[name].shape != shape:
            raise CheckpointError(f"{path}: tensor {name!r} has shape {tensors[name].shape}, config implies {shape}")
    params = ModelParams(config, {k: tensors[k] for k in shapes})

    optimizer = None
    if meta.get("optimizer_step") is not None:
        m, v = {}, {}
        for name, shape in shapes.items():
            for prefix, dest in ((M_PREFIX, m), (V_PREFIX, v)):
                t = tensors.get(prefix + name)
                if t is None or t.shape != shape:
                    raise CheckpointError(f"{path}: optimizer tensor {prefix + name!r} missing or misshapen")
                dest[name] = t
        optimizer = AdamState(int(meta["optimizer_step"]), m, v)
    return Checkpoint(params, int(meta.get("global_step", 0)), int(meta.get("epoch", 0)), optimizer)
