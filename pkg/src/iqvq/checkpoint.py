"""Binary checkpoint format.

Layout (little-endian)::

    b"IQVQ" | version u32 | record count u32
    per record: name length u16 | UTF-8 name | rank u8 | extents u32 × rank | float64 payload
    trailer: byte length u32 | UTF-8 "key=value" lines
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Tensor

MAGIC = b"IQVQ"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    metadata: dict[str, str] = field(default_factory=dict)

    @classmethod
    def from_params(cls, params: dict[str, Tensor], metadata: dict | None = None, prefix: str = "") -> "Checkpoint":
        ck = cls(metadata={k: str(v) for k, v in (metadata or {}).items()})
        ck.add(params, prefix)
        return ck

    def add(self, params: dict[str, Tensor], prefix: str = ""):
        for name, t in params.items():
            data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
            self.tensors[prefix + name] = np.array(data, dtype=np.float64, copy=True)

    def params(self, prefix: str = "", trainable: bool = True) -> dict[str, Tensor]:
        """Fresh tensors for every record under ``prefix`` (prefix stripped)."""
        out = {}
        for name, data in self.tensors.items():
            if name.startswith(prefix):
                out[name[len(prefix):]] = Tensor(data.copy(), requires_grad=trainable)
        return out

    def has(self, prefix: str) -> bool:
        return any(k.startswith(prefix) for k in self.tensors)

    def digest(self, prefix: str = "") -> str:
        """SHA-256 over names, extents and bytes of the records under ``prefix``."""
        h = hashlib.sha256()
        for name in sorted(self.tensors):
            if name.startswith(prefix):
                a = self.tensors[name]
                h.update(name.encode())
                h.update(np.asarray(a.shape, dtype="<u4").tobytes())
                h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
        return h.hexdigest()

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<II", VERSION, len(self.tensors))]
        for name, a in self.tensors.items():
            raw = name.encode("utf-8")
            if len(raw) > 0xFFFF:
                raise CheckpointError(f"tensor name too long: {name[:40]}...")
            parts.append(struct.pack("<H", len(raw)) + raw)
            parts.append(struct.pack("<B", a.ndim))
            parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
            parts.append(np.ascontiguousarray(a, dtype="<f8").tobytes())
        meta = "\n".join(f"{k}={v}" for k, v in self.metadata.items()).encode("utf-8")
        parts.append(struct.pack("<I", len(meta)) + meta)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if buf[:4] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        try:
            version, count = struct.unpack_from("<II", buf, 4)
            if version != VERSION:
                raise CheckpointError(f"unsupported checkpoint version {version}")
            off = 12
            tensors = {}
            for _ in range(count):
                (n,) = struct.unpack_from("<H", buf, off)
                off += 2
                name = buf[off : off + n].decode("utf-8")
                off += n
                (rank,) = struct.unpack_from("<B", buf, off)
                off += 1
                shape = struct.unpack_from(f"<{rank}I", buf, off)
                off += 4 * rank
                size = int(np.prod(shape, dtype=np.int64))
                a = np.frombuffer(buf, dtype="<f8", count=size, offset=off).astype(np.float64)
                off += 8 * size
                tensors[name] = a.reshape(shape)
            (mlen,) = struct.unpack_from("<I", buf, off)
            off += 4
            text = buf[off : off + mlen].decode("utf-8")
            if off + mlen != len(buf):
                raise CheckpointError("trailing bytes after metadata block")
        except (struct.error, ValueError) as e:
            if isinstance(e, CheckpointError):
                raise
            raise CheckpointError(f"truncated or corrupt checkpoint: {e}") from e
        meta = dict(line.split("=", 1) for line in text.splitlines() if line)
        return cls(tensors, meta)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())
