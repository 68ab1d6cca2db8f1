"""Binary checkpoints of named tensors.

Layout, all little-endian::

    b"DCEB"                       magic
    u32 version                   currently 1
    u32 n, n bytes                UTF-8 JSON: {"model_config", "labels", "vocab"}
    u32 tensor count
    per tensor:
        u32 n, n bytes            UTF-8 name
        u32 rank
        u64 * rank                dims
        f32 * prod(dims)          values, row-major

Values are narrowed from float64 to float32 on save.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Vocab
from .model import Model, ModelConfig, build

MAGIC = b"DCEB"
VERSION = 1


class CheckpointError(ValueError):
    """The file is not a readable checkpoint of a supported version."""


@dataclass
class Checkpoint:
    model: Model
    labels: list[str]
    vocab: Vocab


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def encode(model: Model, labels, vocab: Vocab) -> bytes:
    meta = {"model_config": model.config.to_dict(), "labels": list(labels), "vocab": vocab.itos}
    parts = [MAGIC, struct.pack("<I", VERSION),
             _blob(json.dumps(meta, ensure_ascii=False, sort_keys=True).encode("utf-8"))]
    named = model.named_parameters()
    parts.append(struct.pack("<I", len(named)))
    for name, t in named:
        parts.append(_blob(name.encode("utf-8")))
        parts.append(struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(t.values.astype("<f4").tobytes())
    return b"".join(parts)


def save(path: str | Path, model: Model, labels, vocab: Vocab) -> None:
    Path(path).write_bytes(encode(model, labels, vocab))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"corrupt checkpoint: truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> Checkpoint:
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic (expected b'DCEB')")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (reader supports {VERSION})")
    (n,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(n).decode("utf-8"))
        config = ModelConfig.from_dict(meta["model_config"])
        labels, vocab = list(meta["labels"]), Vocab(meta["vocab"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"corrupt checkpoint: unreadable header ({exc})") from exc
    (count,) = r.unpack("<I")
    state = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        name = r.take(n).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}Q")
        size = int(np.prod(dims, dtype=np.int64))
        values = np.frombuffer(r.take(4 * size), dtype="<f4").reshape(dims)
        state[name] = values.astype(np.float64)
    if r.pos != len(data):
        raise CheckpointError(f"corrupt checkpoint: {len(data) - r.pos} trailing bytes")
    try:
        model = build(config)
        model.load_state_dict(state)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return Checkpoint(model, labels, vocab)


def load(path: str | Path) -> Checkpoint:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror or exc}") from exc
    return decode(data)
