"""Little-endian binary formats for volumes, masks and checkpoints.

Volume (``.apvl``)::

    b"APVL" | u32 version | u32 slices | u32 channels | u32 H | u32 W | f32[...]

Checkpoint (``.apck``)::

    b"APCK" | u32 version | u32 count |
      count x (u16 name_len | utf-8 name | u8 rank | u32[rank] dims | f32[...]) |
    u32 crc32(all preceding bytes)
"""
from __future__ import annotations

import os
import struct
import zlib
from pathlib import Path

import numpy as np

VOLUME_MAGIC = b"APVL"
CHECKPOINT_MAGIC = b"APCK"
FORMAT_VERSION = 1


class FormatError(ValueError):
    """Base class for malformed files."""


class BadMagicError(FormatError):
    pass


class VersionMismatchError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class NonBinaryMaskError(FormatError):
    pass


def _atomic_write(path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def encode_volume(vol) -> bytes:
    vol = np.asarray(vol)
    if vol.ndim != 4:
        raise ValueError(f"volume must be 4-d (slices, channels, H, W), got shape {vol.shape}")
    header = VOLUME_MAGIC + struct.pack("<5I", FORMAT_VERSION, *vol.shape)
    return header + np.ascontiguousarray(vol, dtype="<f4").tobytes()


def decode_volume(buf: bytes) -> np.ndarray:
    if len(buf) < 24:
        raise TruncatedFileError("volume header truncated")
    if buf[:4] != VOLUME_MAGIC:
        raise BadMagicError(f"bad volume magic {buf[:4]!r}")
    version, s, c, h, w = struct.unpack_from("<5I", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"volume version {version}, expected {FORMAT_VERSION}")
    count = s * c * h * w
    payload = buf[24:]
    if len(payload) < 4 * count:
        raise TruncatedFileError(f"volume payload has {len(payload)} bytes, header declares {4 * count}")
    if len(payload) > 4 * count:
        raise FormatError("trailing bytes after volume payload")
    return np.frombuffer(payload, dtype="<f4").reshape(s, c, h, w).astype(np.float32)


def write_volume(path, vol):
    _atomic_write(path, encode_volume(vol))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


def write_mask(path, mask):
    mask = np.asarray(mask)
    if not np.isin(mask, (0, 1)).all():
        raise NonBinaryMaskError("mask values must be 0 or 1")
    write_volume(path, mask.astype(np.float32))


def read_mask(path) -> np.ndarray:
    vol = read_volume(path)
    if not np.isin(vol, (0.0, 1.0)).all():
        raise NonBinaryMaskError(f"{path}: mask contains values other than 0 and 1")
    return vol


def encode_checkpoint(tensors: dict) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r} cannot be encoded")
        parts.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode_checkpoint(buf: bytes) -> dict:
    if len(buf) < 16:
        raise TruncatedFileError("checkpoint truncated")
    if buf[:4] != CHECKPOINT_MAGIC:
        raise BadMagicError(f"bad checkpoint magic {buf[:4]!r}")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    body, (crc,) = buf[:-4], struct.unpack("<I", buf[-4:])
    pos = 12
    out = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            if pos + nlen > len(body):
                raise TruncatedFileError("checkpoint truncated inside a tensor name")
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            n = int(np.prod(dims)) if rank else 1
            if pos + 4 * n > len(body):
                raise TruncatedFileError(f"checkpoint truncated inside tensor {name!r}")
            out[name] = np.frombuffer(body, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise TruncatedFileError(f"checkpoint truncated: {exc}") from None
    except UnicodeDecodeError:
        raise ChecksumError("checkpoint corrupted (undecodable tensor name)") from None
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise ChecksumError("checkpoint CRC32 mismatch")
    if pos != len(body):
        raise TruncatedFileError("checkpoint length does not match its tensor table")
    return out


def save_checkpoint(path, tensors: dict):
    _atomic_write(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict:
    return decode_checkpoint(Path(path).read_bytes())
