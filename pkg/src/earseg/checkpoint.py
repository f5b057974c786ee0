"""Versioned binary checkpoint of named tensors.

File layout (all integers little-endian)::

    bytes 0..7    magic b"EARSEGCK"
    bytes 8..11   uint32 format version (currently 1)
    bytes 12..15  uint32 header length L
    next L bytes  UTF-8 JSON header, keys sorted, no whitespace:
                  {"meta": {...},
                   "tensors": [{"name", "dtype", "shape", "offset", "nbytes"}, ...]}
    remainder     raw C-order tensor data, concatenated in header order

Tensor names are namespaced: ``backbone.*`` and ``eam.*`` hold weights and
BN running statistics, ``opt.*`` holds SGD momentum buffers. Because the
header is canonical JSON and tensors are written sorted by name, loading
and re-saving a checkpoint reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EARSEGCK"
VERSION = 1


class CheckpointError(RuntimeError):
    """Unreadable or inconsistent checkpoint."""


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @property
    def epoch(self) -> int:
        return int(self.meta.get("epoch", 0))

    @property
    def config_hash(self) -> str:
        return self.meta.get("config_hash", "")

    def has_eam(self) -> bool:
        return any(k.startswith("eam.") for k in self.tensors)

    def subset(self, prefix: str) -> dict:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def to_bytes(self) -> bytes:
        entries, chunks, offset = [], [], 0
        for name in sorted(self.tensors):
            arr = np.ascontiguousarray(self.tensors[name])
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = arr.tobytes()
            entries.append({
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            })
            chunks.append(raw)
            offset += len(raw)
        header = json.dumps({"meta": self.meta, "tensors": entries},
                            sort_keys=True, separators=(",", ":")).encode()
        return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 16 or blob[:8] != MAGIC:
            raise CheckpointError("checkpoint parse error: bad magic")
        version, hlen = struct.unpack("<II", blob[8:16])
        if version != VERSION:
            raise CheckpointError(f"checkpoint parse error: unsupported version {version}")
        try:
            header = json.loads(blob[16:16 + hlen].decode())
            body = memoryview(blob)[16 + hlen:]
            tensors = {}
            for e in header["tensors"]:
                start, n = e["offset"], e["nbytes"]
                if start + n > len(body):
                    raise CheckpointError(f"checkpoint parse error: {e['name']} truncated")
                arr = np.frombuffer(body[start:start + n], dtype=np.dtype(e["dtype"]))
                tensors[e["name"]] = arr.reshape(e["shape"]).copy()
        except CheckpointError:
            raise
        except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"checkpoint parse error: {exc}") from exc
        return cls(tensors, header["meta"])

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint not found: {path}")
        return cls.from_bytes(path.read_bytes())

    def digest(self) -> str:
        return hashlib.sha256(self.to_bytes()).hexdigest()


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
