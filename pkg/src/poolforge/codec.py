"""Block codecs: zero-length encoding and the 256-bit block checksum."""

import hashlib

import numpy as np

from . import _kernels

COMPRESS_RAW = 0
COMPRESS_ZLE = 1

DIGEST_SIZE = 32


class CorruptStream(ValueError):
    """A compressed payload does not decode to its declared logical size."""


def checksum256(data) -> bytes:
    """SHA-256 digest of ``data`` (FIPS 180-4)."""
    return hashlib.sha256(data).digest()


def compress_zle(data) -> bytes:
    """Greedy zero-length encoding.

    Control byte ``t < 0x80`` introduces ``t + 1`` literal bytes;
    ``t >= 0x80`` stands for ``t - 0x7F`` zero bytes.
    """
    if len(data) == 0:
        raise ValueError("compress_zle needs a non-empty input")
    src = np.frombuffer(bytes(data), dtype=np.uint8)
    return _kernels.zle_encode(src).tobytes()


def decompress_zle(data, logical_size: int, allow_padding: bool = False) -> bytes:
    """Inverse of :func:`compress_zle`.

    With ``allow_padding`` the bytes after the last token must all be zero
    (sector padding of the on-disk form); otherwise the stream must end
    exactly at the last token.
    """
    if logical_size <= 0:
        raise CorruptStream("logical size must be positive")
    src = np.frombuffer(bytes(data), dtype=np.uint8)
    out, status, used = _kernels.zle_decode(src, logical_size)
    if status == _kernels.DECODE_TRUNCATED:
        raise CorruptStream("truncated zle stream")
    if status == _kernels.DECODE_OVERFLOW:
        raise CorruptStream("zle stream decodes past logical size")
    if used != len(src):
        tail = src[used:]
        if not allow_padding or tail.any():
            raise CorruptStream("trailing bytes after zle stream")
    return out.tobytes()


def pad_to_sectors(data: bytes, sector_size: int) -> bytes:
    rem = len(data) % sector_size
    if rem:
        data = data + bytes(sector_size - rem)
    return data


def sectors_for(nbytes: int, sector_size: int) -> int:
    return -(-nbytes // sector_size)


def encode_physical(logical: bytes, sector_size: int, allow_compression: bool = True):
    """Choose the on-disk form of a logical block.

    Returns ``(compression, physical)`` where ``physical`` is padded to whole
    sectors. ZLE is kept only when it saves at least one full sector.
    """
    raw_sectors = sectors_for(len(logical), sector_size)
    if allow_compression:
        packed = compress_zle(logical)
        if sectors_for(len(packed), sector_size) < raw_sectors:
            return COMPRESS_ZLE, pad_to_sectors(packed, sector_size)
    return COMPRESS_RAW, pad_to_sectors(bytes(logical), sector_size)


def decode_physical(compression: int, physical: bytes, logical_size: int) -> bytes:
    if compression == COMPRESS_RAW:
        if len(physical) < logical_size:
            raise CorruptStream("raw payload shorter than logical size")
        return bytes(physical[:logical_size])
    if compression == COMPRESS_ZLE:
        return decompress_zle(physical, logical_size, allow_padding=True)
    raise CorruptStream(f"unknown compression tag {compression}")
