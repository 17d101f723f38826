"""Binary checkpoint format.

Layout (little-endian)::

    b"MTC1" | u32 version | u32 len + UTF-8 config text
    repeated: u32 len + UTF-8 name | u32 rows | u32 cols | rows*cols f64
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import struct
import warnings
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .errors import IncompatibleVersionError, IntegrityError

MAGIC = b"MTC1"
VERSION = 1


@dataclass
class Checkpoint:
    config: TrainConfig
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = VERSION

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {k[len("param/") :]: v for k, v in self.tensors.items() if k.startswith("param/")}

    @property
    def best_valid(self) -> float:
        t = self.tensors.get("meta/best_valid")
        return float(t[0, 0]) if t is not None else float("nan")


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", ckpt.version)]
    text = ckpt.config.to_text().encode("utf-8")
    parts += [struct.pack("<I", len(text)), text]
    for name in sorted(ckpt.tensors):
        arr = np.ascontiguousarray(ckpt.tensors[name], dtype="<f8")
        if arr.ndim != 2:
            raise ValueError(f"tensor {name!r} must be 2-D")
        raw_name = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw_name)), raw_name, struct.pack("<II", *arr.shape), arr.tobytes()]
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def from_bytes(raw: bytes, strict_grid: bool | None = None) -> Checkpoint:
    if len(raw) < 16:
        raise IntegrityError("checkpoint truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise IntegrityError("checkpoint checksum mismatch (corrupt or truncated file)")
    if body[:4] != MAGIC:
        raise IntegrityError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack_from("<I", body, 4)
    if version != VERSION:
        raise IncompatibleVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    pos = 8
    try:
        (n,) = struct.unpack_from("<I", body, pos)
        text = body[pos + 4 : pos + 4 + n].decode("utf-8")
        pos += 4 + n
        tensors = {}
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            name = body[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            rows, cols = struct.unpack_from("<II", body, pos)
            pos += 8
            size = 8 * rows * cols
            if pos + size > len(body):
                raise IntegrityError(f"tensor {name!r} runs past the end of the file")
            tensors[name] = np.frombuffer(body, dtype="<f8", count=rows * cols, offset=pos).reshape(rows, cols).copy()
            pos += size
    except struct.error as exc:
        raise IntegrityError(f"malformed checkpoint: {exc}") from None
    config = TrainConfig.from_text(text)
    if strict_grid is not None and strict_grid != config.strict_grid:
        warnings.warn(
            f"strict_grid={strict_grid} requested but the checkpoint was written with "
            f"strict_grid={config.strict_grid}; using the checkpoint's configuration",
            stacklevel=2,
        )
    return Checkpoint(config, tensors, version)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    Path(path).write_bytes(to_bytes(ckpt))


def load_checkpoint(path, strict_grid: bool | None = None) -> Checkpoint:
    return from_bytes(Path(path).read_bytes(), strict_grid)
