"""Binary checkpoints: a JSON metadata block followed by a table of named float32 arrays.

Layout (all integers little-endian):

    b"MMRL"  u32 version  u64 meta_len  meta (UTF-8 JSON, sorted keys)
    u64 array_count
    per array: u64 name_len  name (UTF-8)  u64 ndim  u64 dims[ndim]  f32 data
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from .config import RunConfig, build_run_config
from .errors import CheckpointError, ConfigurationError
from .model import AgentModel, init_model
from .numeric.tree import tree_flatten, tree_unflatten

MAGIC = b"MMRL"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: AgentModel
    run: RunConfig
    meta: dict[str, Any]

    @property
    def alpha_ema(self) -> float:
        return float(self.meta.get("alpha_ema", 1.0))


def encode_checkpoint(model: AgentModel, run: RunConfig, meta: dict[str, Any]) -> bytes:
    payload = dict(meta, config=run.to_dict(), version=FORMAT_VERSION)
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    arrays = {name: np.asarray(a) for name, a in tree_flatten(model).items()}

    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(blob)), blob]
    parts.append(struct.pack("<Q", len(arrays)))
    for name in sorted(arrays):
        arr = arrays[name]
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path: Path, model: AgentModel, run: RunConfig, **meta: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(model, run, meta))
    return path


class _Reader:
    def __init__(self, data: bytes, source: str) -> None:
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.source}: truncated at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    reader = _Reader(data, source)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{source}: format version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(reader.take(reader.u64()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: unreadable metadata: {exc}") from exc

    arrays: dict[str, np.ndarray] = {}
    for _ in range(reader.u64()):
        name = reader.take(reader.u64()).decode("utf-8")
        ndim = reader.u64()
        shape = struct.unpack(f"<{ndim}Q", reader.take(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(reader.take(4 * count), dtype="<f4").reshape(shape)
    if reader.pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - reader.pos} trailing bytes")

    try:
        run = build_run_config(meta["config"])
    except (KeyError, ConfigurationError) as exc:
        raise CheckpointError(f"{source}: stored config is invalid: {exc}") from exc

    template = init_model(np.random.default_rng(0), run.task, run.model)
    try:
        model = tree_unflatten(template, arrays)
    except ConfigurationError as exc:
        raise CheckpointError(f"{source}: {exc}") from exc
    extra = set(arrays) - set(tree_flatten(template))
    if extra:
        raise CheckpointError(f"{source}: unexpected arrays {sorted(extra)}")
    return Checkpoint(model=model, run=run, meta=meta)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    return decode_checkpoint(path.read_bytes(), str(path))
