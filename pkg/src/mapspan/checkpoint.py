"""Checkpoint files: a JSON header followed by one little-endian float64 block.

Layout::

    b"MAPSPAN1"  | uint64 LE header length | UTF-8 JSON header | float64 LE values

The header lists every parameter's name, shape and offset (in values) into
the block, plus the model config, vocabulary, seed and any extra metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import ParameterSet
from .encoder import Vocabulary
from .model import ModelConfig, SpanModel

MAGIC = b"MAPSPAN1"
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    """Malformed or inconsistent checkpoint file."""


def save_checkpoint(model: SpanModel, path, seed: int | None = None, extra: dict | None = None) -> None:
    entries, offset = [], 0
    for name, t in model.params.items():
        entries.append({"name": name, "shape": list(t.data.shape), "offset": offset})
        offset += t.data.size
    header = {
        "format": 1,
        "params": entries,
        "total": offset,
        "config": model.cfg.to_dict(),
        "vocab": model.vocab.to_list(),
        "seed": seed,
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    block = np.concatenate([t.data.ravel() for _, t in model.params.items()]) if entries else np.zeros(0)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(block.astype(_DTYPE).tobytes())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path) -> dict:
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    size = fh.read(8)
    if len(size) != 8:
        raise CheckpointError(f"{path}: truncated header length")
    (n,) = struct.unpack("<Q", size)
    try:
        return json.loads(fh.read(n).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc


def load_checkpoint(path) -> tuple[SpanModel, dict]:
    """Rebuild the model; also returns the header for seed and metadata."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = _read_header(fh, path)
        values = np.frombuffer(fh.read(), dtype=_DTYPE)
    if values.size != header["total"]:
        raise CheckpointError(f"{path}: expected {header['total']} values, found {values.size}")
    params = ParameterSet()
    for ent in header["params"]:
        size = int(np.prod(ent["shape"], dtype=np.int64))
        chunk = values[ent["offset"]:ent["offset"] + size]
        params.add(ent["name"], chunk.reshape(ent["shape"]).astype(np.float64))
    cfg = ModelConfig.from_dict(header["config"])
    return SpanModel(cfg, params, Vocabulary.from_list(header["vocab"])), header
