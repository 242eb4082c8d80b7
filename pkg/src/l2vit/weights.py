"""Deterministic weight initialization and bit-exact binary serialization.

On-disk layout (little-endian):
    magic "L2VT" | u32 version=1 | u32 tensor count
    per tensor, sorted by name:
        u16 name length | name (UTF-8) | u8 rank | u64 dims... | f32 payload
    u32 CRC32 of everything between the 12-byte header and the checksum

Tensors are float64 in memory but stored as float32 (round-to-nearest on
save, widened on load). The initializer snaps every draw onto the float32
grid, so init -> save -> load is lossless and save -> load -> save is
byte-identical.
"""
from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

from .model import ModelConfig, WeightStore, weight_spec

MAGIC = b"L2VT"
FORMAT_VERSION = 1
TRUNC_STD = 0.02
TRUNC_BOUND = 2.0  # in units of std; draws outside are resampled


class WeightFormatError(ValueError):
    """The byte stream is not a valid weight file."""


def truncated_normal(rng: np.random.Generator, shape, std: float = TRUNC_STD):
    """Normal draws with |x| > TRUNC_BOUND*std rejected and redrawn."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > TRUNC_BOUND
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > TRUNC_BOUND
    return out * std


def init_weights(cfg: ModelConfig, seed: int) -> WeightStore:
    """Build a complete store for cfg; identical seeds give bit-identical
    stores. Values are float32-representable (see module docstring)."""
    rng = np.random.default_rng(np.uint64(seed))
    store = WeightStore()
    for record in weight_spec(cfg):
        if record.init == "trunc_normal":
            arr = truncated_normal(rng, record.shape)
        elif record.init == "zeros":
            arr = np.zeros(record.shape)
        elif record.init == "ones":
            arr = np.ones(record.shape)
        elif record.init == "const":
            arr = np.full(record.shape, record.const)
        else:  # pragma: no cover - weight_spec emits only the kinds above
            raise ValueError(f"unknown init {record.init!r}")
        store[record.name] = arr.astype(np.float32).astype(np.float64)
    return store


def save_weights(store: WeightStore, path) -> None:
    body = bytearray()
    for name, arr in store.items():
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise WeightFormatError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise WeightFormatError(f"tensor rank too large: {arr.ndim}")
        body += struct.pack("<H", len(encoded)) + encoded
        body += struct.pack("<B", arr.ndim)
        body += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        body += arr.astype("<f4").tobytes(order="C")
    blob = MAGIC + struct.pack("<II", FORMAT_VERSION, len(store)) + bytes(body)
    blob += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(blob)


def load_weights(path) -> WeightStore:
    blob = Path(path).read_bytes()
    if len(blob) < 16:
        raise WeightFormatError("file truncated: missing header or checksum")
    if blob[:4] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise WeightFormatError(f"unsupported format version {version}")
    body, (stored_crc,) = blob[12:-4], struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != stored_crc:
        raise WeightFormatError("checksum mismatch: payload corrupted")
    store = WeightStore()
    offset = 0
    for _ in range(count):
        offset, name, arr = _read_tensor(body, offset)
        if name in store:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        store[name] = arr
    if offset != len(body):
        raise WeightFormatError(f"{len(body) - offset} trailing bytes after tensors")
    return store


def _read_tensor(body: bytes, offset: int):
    def need(n: int):
        if offset + n > len(body):
            raise WeightFormatError("file truncated inside a tensor record")

    need(2)
    (name_len,) = struct.unpack_from("<H", body, offset)
    offset += 2
    need(name_len + 1)
    name = body[offset:offset + name_len].decode("utf-8")
    offset += name_len
    rank = body[offset]
    offset += 1
    need(8 * rank)
    shape = struct.unpack_from(f"<{rank}Q", body, offset)
    offset += 8 * rank
    size = int(np.prod(shape)) if rank else 1
    need(4 * size)
    flat = np.frombuffer(body, dtype="<f4", count=size, offset=offset)
    offset += 4 * size
    return offset, name, flat.astype(np.float64).reshape(shape)
