"""Versioned little-endian checkpoint container.

Layout::

    b"DISCKPT" version:u8
    config:   u32 length + UTF-8 ``key = value`` text
    step:     u64
    rng:      u32 length + UTF-8 JSON
    sections: u32 count, each  u32 name-len, name, u32 tensor-count,
              tensors          u32 name-len, name, u8 ndim, u32 dims..., float32 payload
    crc32 of everything above: u32

Serialisation is canonical (sorted names, sorted JSON keys), so loading and
re-saving yields identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"DISCKPT"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


@dataclass
class Checkpoint:
    config_text: str
    step: int
    sections: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)

    def table(self, name: str) -> dict[str, np.ndarray]:
        if name not in self.sections:
            raise CheckpointError(f"checkpoint has no {name!r} section (have {sorted(self.sections)})")
        return self.sections[name]

    def to_bytes(self) -> bytes:
        out = bytearray(MAGIC)
        out += struct.pack("<B", VERSION)
        _put_str(out, self.config_text)
        out += struct.pack("<Q", self.step)
        _put_str(out, json.dumps(self.rng_state, sort_keys=True, separators=(",", ":")))
        out += struct.pack("<I", len(self.sections))
        for sec in sorted(self.sections):
            tensors = self.sections[sec]
            _put_str(out, sec)
            out += struct.pack("<I", len(tensors))
            for name in sorted(tensors):
                arr = np.asarray(tensors[name])
                _put_str(out, name)
                out += struct.pack("<B", arr.ndim)
                out += struct.pack(f"<{arr.ndim}I", *arr.shape)
                out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
        out += struct.pack("<I", zlib.crc32(out))
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "Checkpoint":
        if len(buf) < len(MAGIC) + 5 or buf[:len(MAGIC)] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        version = buf[len(MAGIC)]
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
        body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
        if zlib.crc32(body) != crc:
            raise CheckpointError(f"checkpoint v{version} is truncated or corrupt (checksum mismatch)")
        r = _Reader(body, len(MAGIC) + 1)
        config_text = r.string()
        (step,) = r.unpack("<Q")
        rng_state = json.loads(r.string())
        sections: dict[str, dict[str, np.ndarray]] = {}
        (nsec,) = r.unpack("<I")
        for _ in range(nsec):
            sec = r.string()
            (count,) = r.unpack("<I")
            table = {}
            for _ in range(count):
                name = r.string()
                (ndim,) = r.unpack("<B")
                shape = r.unpack(f"<{ndim}I")
                n = int(np.prod(shape, dtype=np.int64))
                table[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(shape).astype(np.float32)
            sections[sec] = table
        if r.pos != len(body):
            raise CheckpointError("trailing bytes in checkpoint")
        return cls(config_text, step, sections, rng_state)

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        try:
            buf = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_bytes(buf)


def _put_str(out: bytearray, s: str) -> None:
    b = s.encode("utf-8")
    out += struct.pack("<I", len(b)) + b


class _Reader:
    def __init__(self, buf: bytes, pos: int):
        self.buf, self.pos = buf, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (n,) = self.unpack("<I")
        return self.take(n).decode("utf-8")
