"""Binary checkpoint format.

Layout (all integers little-endian u32):

    bytes 0..3   magic "RGVP"
    u32          format version (currently 1)
    u32          config blob length, then that many bytes of canonical JSON
                 (sorted keys, no whitespace) for ModelConfig
    u32          tensor count
    per tensor:  u32 name length, name (utf-8), u32 rank, rank * u32 dims,
                 row-major little-endian float32 data

Parameters are stored as float32; loading a checkpoint rebuilds the model from
the embedded config and fills every tensor, rejecting unknown versions,
truncated files and name/shape mismatches.
"""

from __future__ import annotations

import dataclasses
import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .model import ModelConfig, VlmModel

MAGIC = b"RGVP"
VERSION = 1


class CheckpointError(ValueError):
    pass


def config_to_json(config: ModelConfig) -> str:
    return json.dumps(dataclasses.asdict(config), sort_keys=True, separators=(",", ":"))


def config_from_json(blob: str) -> ModelConfig:
    try:
        return ModelConfig(**json.loads(blob))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"bad config blob in checkpoint: {exc}") from exc


def save_checkpoint(model: VlmModel, path: Path | str) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = config_to_json(model.config).encode("utf-8")
    state = model.state_dict()
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(blob)), blob]
    parts.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        tensor = state[name].detach().to(torch.float32).contiguous()
        name_bytes = name.encode("utf-8")
        parts.append(struct.pack("<I", len(name_bytes)))
        parts.append(name_bytes)
        dims = tuple(tensor.shape)
        parts.append(struct.pack("<I", len(dims)))
        parts.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        parts.append(tensor.numpy().astype("<f4").tobytes())
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.path = path
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: Path | str) -> VlmModel:
    path = Path(path)
    reader = _Reader(path.read_bytes(), path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not a checkpoint)")
    version = reader.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unknown format version {version}")
    config = config_from_json(reader.take(reader.u32()).decode("utf-8"))
    n_tensors = reader.u32()
    state: dict[str, torch.Tensor] = {}
    for _ in range(n_tensors):
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        dims = struct.unpack(f"<{rank}I", reader.take(4 * rank)) if rank else ()
        count = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(reader.take(4 * count), dtype="<f4").copy()
        state[name] = torch.from_numpy(data.reshape(dims))
    if reader.offset != len(reader.blob):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    model = VlmModel(config)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: tensor table does not match config: {exc}") from exc
    return model
