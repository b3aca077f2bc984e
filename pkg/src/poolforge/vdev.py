"""File-backed virtual block devices.

A device is a flat file of ``capacity_sectors * sector_size`` bytes. The
first and last 128 sectors hold two copies of the label: a 512-byte header
followed, at byte 8192 of the region, by a ring of 128 uberblock slots of
256 bytes each. Everything is little-endian.
"""

import os
import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .codec import checksum256

DEFAULT_SECTOR_SIZE = 512
LABEL_SECTORS = 128
MIN_CAPACITY_SECTORS = 2 * LABEL_SECTORS
DEVICE_MAGIC = b"PFVDEV01"
SLOT_MAGIC = b"PFUBER01"
LABEL_VERSION = 1

HEADER_SIZE = 512
RING_OFFSET = 8192
RING_SLOTS = 128
SLOT_SIZE = 256
SLOT_PAYLOAD_SIZE = SLOT_SIZE - 8 - 8 - 32
NAME_MAX = 256

# magic, version, child_index, child_count, sector_size, capacity,
# pool_guid, device_guid, name_len
_HEADER = struct.Struct("<8sIIIIQ16s16sH")
_HEADER_SUM_AT = HEADER_SIZE - 32


class VdevError(Exception):
    pass


class DeviceIOError(VdevError, OSError):
    """Read or write refused by an offline device or a read-error fault."""


class OutOfBounds(VdevError, IndexError):
    pass


class UnlabeledDevice(VdevError):
    pass


class PowerLoss(VdevError):
    """Raised when a crash budget runs out in the middle of a write."""


class FaultKind(str, Enum):
    SILENT_CORRUPTION = "silent-corruption"
    OFFLINE = "offline"
    READ_ERROR = "read-error"
    LATENCY = "latency"


@dataclass(frozen=True)
class FaultSpec:
    """A fault over the sector interval ``[start, start + count)``.

    ``parameter`` is the corruption seed for silent corruption and the added
    virtual milliseconds per I/O for latency faults. Offline faults ignore the
    range.
    """

    kind: FaultKind
    start: int = 0
    count: int = 0
    parameter: int = 0

    def overlaps(self, offset: int, count: int) -> bool:
        return self.start < offset + count and offset < self.start + self.count

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "start": self.start, "count": self.count,
                "parameter": self.parameter}

    @classmethod
    def from_dict(cls, d: dict) -> "FaultSpec":
        return cls(FaultKind(d["kind"]), int(d["start"]), int(d["count"]), int(d["parameter"]))


class WriteBudget:
    """Shared sector budget; writes past it are cut and raise PowerLoss."""

    def __init__(self, sectors: int):
        self.remaining = sectors

    def take(self, wanted: int) -> int:
        granted = min(wanted, self.remaining)
        self.remaining -= granted
        return granted


@dataclass
class Device:
    path: str
    capacity_sectors: int
    sector_size: int
    device_guid: bytes
    faults: list = field(default_factory=list)
    budget: WriteBudget | None = None
    recorder: list | None = None
    bytes_read: int = 0
    bytes_written: int = 0
    latency_ms: int = 0
    _fd: int = -1

    def __post_init__(self):
        if self._fd < 0:
            self._fd = os.open(self.path, os.O_RDWR)

    def close(self) -> None:
        if self._fd >= 0:
            os.close(self._fd)
            self._fd = -1

    def fsync(self) -> None:
        os.fsync(self._fd)

    def _check(self, offset: int, count: int) -> None:
        if offset < 0 or count < 0 or offset + count > self.capacity_sectors:
            raise OutOfBounds(
                f"sectors [{offset}, {offset + count}) outside device of {self.capacity_sectors}")

    def _charge_latency(self, offset: int, count: int) -> None:
        for f in self.faults:
            if f.kind is FaultKind.LATENCY and f.overlaps(offset, count):
                self.latency_ms += f.parameter

    @property
    def offline(self) -> bool:
        return any(f.kind is FaultKind.OFFLINE for f in self.faults)

    def read_sectors(self, offset: int, count: int) -> bytes:
        self._check(offset, count)
        if self.offline:
            raise DeviceIOError(f"{self.path}: device offline")
        for f in self.faults:
            if f.kind is FaultKind.READ_ERROR and f.overlaps(offset, count):
                raise DeviceIOError(f"{self.path}: read error in sectors {f.start}+{f.count}")
        self._charge_latency(offset, count)
        nbytes = count * self.sector_size
        data = os.pread(self._fd, nbytes, offset * self.sector_size)
        if len(data) != nbytes:
            raise DeviceIOError(f"{self.path}: short read")
        self.bytes_read += nbytes
        return data

    def write_sectors(self, offset: int, data) -> None:
        if len(data) % self.sector_size:
            raise ValueError(f"write of {len(data)} bytes is not sector aligned")
        count = len(data) // self.sector_size
        self._check(offset, count)
        if self.offline:
            raise DeviceIOError(f"{self.path}: device offline")
        self._charge_latency(offset, count)
        granted = count
        if self.budget is not None:
            granted = self.budget.take(count)
        if granted:
            chunk = bytes(data[:granted * self.sector_size])
            if self.recorder is not None:
                self.recorder.append((self.path, offset, chunk))
            os.pwrite(self._fd, chunk, offset * self.sector_size)
            self.bytes_written += len(chunk)
        if granted < count:
            raise PowerLoss(f"{self.path}: power lost after {granted} of {count} sectors")

    def inject_fault(self, spec: FaultSpec) -> None:
        if spec.kind is FaultKind.SILENT_CORRUPTION:
            self._check(spec.start, spec.count)
            for sector in range(spec.start, spec.start + spec.count):
                self._corrupt_sector(sector, spec.parameter)
        self.faults.append(spec)

    def clear_faults(self) -> None:
        self.faults.clear()

    def _corrupt_sector(self, sector: int, seed: int) -> None:
        raw = os.pread(self._fd, self.sector_size, sector * self.sector_size)
        buf = np.frombuffer(raw, dtype=np.uint8).copy()
        rng = np.random.default_rng([seed & 0xFFFFFFFFFFFFFFFF, sector])
        nbits = int(rng.integers(1, 9))
        bits = rng.choice(self.sector_size * 8, size=nbits, replace=False)
        for bit in bits.tolist():
            buf[bit >> 3] ^= np.uint8(1 << (bit & 7))
        os.pwrite(self._fd, buf.tobytes(), sector * self.sector_size)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self) -> str:
        return (f"Device({self.path!r}, capacity_sectors={self.capacity_sectors}, "
                f"sector_size={self.sector_size})")


def create_device(path, capacity_sectors: int, sector_size: int = DEFAULT_SECTOR_SIZE,
                  device_guid: bytes | None = None) -> Device:
    path = os.fspath(path)
    if sector_size < 512 or sector_size & (sector_size - 1):
        raise ValueError(f"sector size {sector_size} is not a power of two >= 512")
    if capacity_sectors < MIN_CAPACITY_SECTORS:
        raise ValueError(
            f"capacity below minimum: {capacity_sectors} < {MIN_CAPACITY_SECTORS} sectors")
    if os.path.exists(path):
        raise FileExistsError(f"device path exists: {path}")
    fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o644)
    try:
        os.ftruncate(fd, capacity_sectors * sector_size)
    finally:
        os.close(fd)
    guid = device_guid if device_guid is not None else os.urandom(16)
    return Device(path, capacity_sectors, sector_size, guid)


def open_device(path, sector_size: int | None = None) -> Device:
    """Open an existing device file; geometry comes from its label if any."""
    path = os.fspath(path)
    size = os.path.getsize(path)
    guid = bytes(16)
    with open(path, "rb") as fh:
        head = fh.read(HEADER_SIZE)
    hdr = _parse_header(head)
    if hdr is not None:
        sector_size = hdr.sector_size
        guid = hdr.device_guid
    if sector_size is None:
        sector_size = DEFAULT_SECTOR_SIZE
    if size % sector_size:
        raise ValueError(f"{path}: size {size} is not a multiple of sector size {sector_size}")
    return Device(path, size // sector_size, sector_size, guid)


# ------------------------------------------------------------------ labels


@dataclass
class Label:
    pool_guid: bytes
    device_guid: bytes
    child_index: int
    child_count: int
    sector_size: int
    capacity_sectors: int
    pool_name: str = ""
    uberblock_ring: list = field(default_factory=lambda: [bytes(SLOT_SIZE)] * RING_SLOTS)
    magic: bytes = DEVICE_MAGIC

    def encode_header(self) -> bytes:
        name = self.pool_name.encode("utf-8")
        if len(name) > NAME_MAX:
            raise ValueError("pool name too long")
        head = _HEADER.pack(self.magic, LABEL_VERSION, self.child_index, self.child_count,
                            self.sector_size, self.capacity_sectors, self.pool_guid,
                            self.device_guid, len(name)) + name
        head = head.ljust(_HEADER_SUM_AT, b"\0")
        return head + checksum256(head)

    @property
    def label_checksum(self) -> bytes:
        return self.encode_header()[_HEADER_SUM_AT:]

    def best_txg(self) -> int:
        txgs = [t for t, _ in filter(None, map(decode_slot, self.uberblock_ring))]
        return max(txgs, default=0)

    def valid_slots(self) -> dict:
        """Map txg -> payload for every slot whose checksum verifies."""
        out = {}
        for idx, raw in enumerate(self.uberblock_ring):
            parsed = decode_slot(raw)
            if parsed is not None and parsed[0] % RING_SLOTS == idx:
                out[parsed[0]] = parsed[1]
        return out


@dataclass
class _Header:
    child_index: int
    child_count: int
    sector_size: int
    capacity_sectors: int
    pool_guid: bytes
    device_guid: bytes
    pool_name: str


def _parse_header(raw: bytes):
    if len(raw) < HEADER_SIZE or raw[:8] != DEVICE_MAGIC:
        return None
    if checksum256(raw[:_HEADER_SUM_AT]) != raw[_HEADER_SUM_AT:HEADER_SIZE]:
        return None
    (_, version, idx, count, ss, cap, pguid, dguid, nlen) = _HEADER.unpack_from(raw)
    if version != LABEL_VERSION or nlen > NAME_MAX:
        return None
    name = raw[_HEADER.size:_HEADER.size + nlen].decode("utf-8", "replace")
    return _Header(idx, count, ss, cap, pguid, dguid, name)


def encode_slot(txg: int, payload: bytes) -> bytes:
    if len(payload) > SLOT_PAYLOAD_SIZE:
        raise ValueError("uberblock payload too large")
    body = SLOT_MAGIC + struct.pack("<Q", txg) + payload.ljust(SLOT_PAYLOAD_SIZE, b"\0")
    return body + checksum256(body)


def decode_slot(raw: bytes):
    """Return ``(txg, payload)`` for a valid slot, else None."""
    if len(raw) != SLOT_SIZE or raw[:8] != SLOT_MAGIC:
        return None
    if checksum256(raw[:-32]) != raw[-32:]:
        return None
    (txg,) = struct.unpack_from("<Q", raw, 8)
    return txg, raw[16:16 + SLOT_PAYLOAD_SIZE]


def _region_starts(device: Device):
    return (0, device.capacity_sectors - LABEL_SECTORS)


def _label_span_sectors(sector_size: int) -> int:
    return -(-(RING_OFFSET + RING_SLOTS * SLOT_SIZE) // sector_size)


def _encode_region(label: Label, sector_size: int) -> bytes:
    span = _label_span_sectors(sector_size) * sector_size
    buf = bytearray(span)
    buf[:HEADER_SIZE] = label.encode_header()
    for i, slot in enumerate(label.uberblock_ring):
        at = RING_OFFSET + i * SLOT_SIZE
        buf[at:at + SLOT_SIZE] = slot
    return bytes(buf)


def write_label(device: Device, label: Label) -> None:
    region = _encode_region(label, device.sector_size)
    for start in _region_starts(device):
        device.write_sectors(start, region)


def read_label_copies(device: Device) -> list:
    """Both label copies in order (head, tail); None where the header is invalid."""
    span = _label_span_sectors(device.sector_size)
    copies = []
    for start in _region_starts(device):
        try:
            raw = device.read_sectors(start, span)
        except DeviceIOError:
            copies.append(None)
            continue
        hdr = _parse_header(raw[:HEADER_SIZE])
        if hdr is None:
            copies.append(None)
            continue
        ring = [raw[RING_OFFSET + i * SLOT_SIZE:RING_OFFSET + (i + 1) * SLOT_SIZE]
                for i in range(RING_SLOTS)]
        copies.append(Label(hdr.pool_guid, hdr.device_guid, hdr.child_index, hdr.child_count,
                            hdr.sector_size, hdr.capacity_sectors, hdr.pool_name, ring))
    return copies


def read_label(device: Device) -> Label:
    best = None
    for copy in read_label_copies(device):
        if copy is not None and (best is None or copy.best_txg() > best.best_txg()):
            best = copy
    if best is None:
        raise UnlabeledDevice(f"unlabeled device: {device.path}")
    return best


def write_uberblock_slot(device: Device, txg: int, slot: bytes, copy: int) -> None:
    """Write ``slot`` into ring position ``txg % 128`` of label copy ``copy``."""
    byte_at = RING_OFFSET + (txg % RING_SLOTS) * SLOT_SIZE
    sector, within = divmod(byte_at, device.sector_size)
    sector += _region_starts(device)[copy]
    raw = bytearray(device.read_sectors(sector, 1))
    raw[within:within + SLOT_SIZE] = slot
    device.write_sectors(sector, raw)


def slot_location(device: Device, txg: int, copy: int):
    """Sector and in-sector byte offset of a ring slot (for test harnesses)."""
    byte_at = RING_OFFSET + (txg % RING_SLOTS) * SLOT_SIZE
    sector, within = divmod(byte_at, device.sector_size)
    return sector + _region_starts(device)[copy], within


def clear_label(device: Device) -> None:
    span = _label_span_sectors(device.sector_size)
    for start in _region_starts(device):
        device.write_sectors(start, bytes(span * device.sector_size))
