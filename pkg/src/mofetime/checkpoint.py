"""Binary checkpoint format.

Layout (little-endian)::

    b"MOFETIME"                      8-byte magic
    u32 version (= 1)
    u32 blob length, blob            canonical JSON: {"model": ModelConfig, "rng_state", "step"}
    per parameter, names sorted:     u32 name length, name (utf-8), u32 count, count x f32
    u64 CRC-64/XZ of everything above
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastcrc import crc64

from .backbone import ConfigError, ModelConfig, MoFETime, init_arrays, params_from_arrays

MAGIC = b"MOFETIME"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    def __init__(self, fields: list[str]):
        self.fields = fields
        super().__init__("checkpoint config differs in: " + ", ".join(fields))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True, allow_nan=False)


@dataclass
class Checkpoint:
    config: ModelConfig
    arrays: dict[str, np.ndarray]  # float32 values widened to float64
    rng_state: dict | None = None
    step: int = 0
    version: int = FORMAT_VERSION

    def to_model(self) -> MoFETime:
        return MoFETime(self.config, params_from_arrays(self.config, self.arrays))


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    rng = np.random.default_rng(0)
    return {k: v.shape for k, v in init_arrays(cfg, rng).items()}


def encode(cfg: ModelConfig, arrays: dict[str, np.ndarray], rng_state: dict | None = None,
           step: int = 0) -> bytes:
    blob = canonical_json({"model": cfg.to_dict(), "rng_state": rng_state, "step": int(step)}).encode()
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(blob)), blob]
    for name in sorted(arrays):
        raw = name.encode("utf-8")
        vals = np.ascontiguousarray(arrays[name], dtype="<f4").reshape(-1)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", vals.size))
        parts.append(vals.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", crc64.xz(body))


def save_checkpoint(model: MoFETime, path, rng_state: dict | None = None, step: int = 0) -> Path:
    path = Path(path)
    data = encode(model.cfg, {k: v.data for k, v in model.params.items()}, rng_state, step)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedCheckpointError(f"file ends inside {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode(buf: bytes, expected: ModelConfig | None = None) -> Checkpoint:
    if not (buf[:len(MAGIC)] == MAGIC or (len(buf) < len(MAGIC) and MAGIC.startswith(buf))):
        raise BadMagicError("not a checkpoint file (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC), "magic")
    version = r.u32("format version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    blob = r.take(r.u32("config length"), "config blob")
    try:
        meta = json.loads(blob.decode("utf-8"))
        cfg = ModelConfig.from_dict(meta["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable config blob: {exc}") from exc
    if expected is not None:
        differing = expected.diff(cfg)
        if differing:
            raise ConfigMismatchError(differing)
    shapes = expected_shapes(cfg)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(len(shapes)):
        name = r.take(r.u32("parameter name length"), "parameter name").decode("utf-8", "replace")
        count = r.u32(f"element count of {name!r}")
        raw = r.take(4 * count, f"values of {name!r}")
        if name not in shapes:
            raise UnknownParameterError(f"unknown parameter {name!r}")
        if name in arrays:
            raise CorruptCheckpointError(f"duplicate parameter {name!r}")
        shape = shapes[name]
        if count != int(np.prod(shape)):
            raise CorruptCheckpointError(f"{name!r} has {count} elements, expected {int(np.prod(shape))}")
        arrays[name] = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(shape)
    trailer = r.take(8, "checksum")
    if r.pos != len(buf):
        raise CorruptCheckpointError(f"{len(buf) - r.pos} unexpected trailing bytes")
    if struct.unpack("<Q", trailer)[0] != crc64.xz(buf[:-8]):
        raise CorruptCheckpointError("checksum mismatch")
    return Checkpoint(cfg, arrays, meta.get("rng_state"), int(meta.get("step", 0)), version)


def load_checkpoint(path, expected: ModelConfig | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expected)


__all__ = [
    "Checkpoint", "CheckpointError", "BadMagicError", "VersionMismatchError",
    "TruncatedCheckpointError", "CorruptCheckpointError", "UnknownParameterError",
    "ConfigMismatchError", "ConfigError", "save_checkpoint", "load_checkpoint", "encode", "decode",
    "canonical_json",
]
