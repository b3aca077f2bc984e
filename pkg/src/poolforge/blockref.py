"""Block references: the checksummed, birth-stamped edges of the pool tree."""

import struct
from dataclasses import dataclass, replace

# start_row, logical_size, physical_sectors, compression, level, type, flags,
# reserved, birth_txg, checksum
_BREF = struct.Struct("<QIIBBBBIQ32s")
BREF_SIZE = _BREF.size
assert BREF_SIZE == 64

FLAG_HOLE = 0x01

TYPE_NONE = 0
TYPE_DATA = 1
TYPE_INDIRECT = 2
TYPE_META = 3
TYPE_CATALOG = 4

MAX_U64 = (1 << 64) - 1


@dataclass(frozen=True)
class BlockRef:
    vdev_start_row: int
    logical_size: int
    physical_sectors: int
    compression: int
    checksum: bytes
    birth_txg: int
    level: int = 0
    block_type: int = TYPE_DATA
    hole: bool = False

    def encode(self) -> bytes:
        flags = FLAG_HOLE if self.hole else 0
        return _BREF.pack(self.vdev_start_row, self.logical_size, self.physical_sectors,
                          self.compression, self.level, self.block_type, flags, 0,
                          self.birth_txg, self.checksum)

    @classmethod
    def decode(cls, raw, offset: int = 0) -> "BlockRef":
        (row, lsize, psec, comp, level, btype, flags, _, birth,
         cksum) = _BREF.unpack_from(raw, offset)
        return cls(row, lsize, psec, comp, cksum, birth, level, btype, bool(flags & FLAG_HOLE))

    def sector_address(self, data_start: int = 0) -> int:
        """Child-relative sector of the stripe's first row."""
        return data_start + self.vdev_start_row

    def byte_address(self, width: int, sector_size: int) -> int:
        """Pool-wide byte address of the stripe start (row-major over children)."""
        return self.vdev_start_row * width * sector_size

    def with_birth(self, txg: int) -> "BlockRef":
        return replace(self, birth_txg=txg)


def hole(level: int = 0, birth: int = 0, block_type: int = TYPE_NONE) -> BlockRef:
    return BlockRef(0, 0, 0, 0, bytes(32), birth, level, block_type, True)


HOLE = hole()


def decode_many(raw: bytes, count: int | None = None) -> list:
    if count is None:
        count = len(raw) // BREF_SIZE
    return [BlockRef.decode(raw, i * BREF_SIZE) for i in range(count)]


def encode_many(brefs) -> bytes:
    return b"".join(b.encode() for b in brefs)
