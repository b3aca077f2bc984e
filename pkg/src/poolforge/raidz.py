"""Single-parity RAID-Z layout with dynamic stripe width.

Every logical block gets its own stripe of ``s`` data sectors starting at
column 0 of a row. Each row is ``[P, D.., D..]`` with parity in column 0 and
up to ``d - 1`` data sectors; only the last row may be short. The total is
padded to an even sector count with zero "skip" sectors so that no odd
single-sector hole can be left behind.

Cell ``(row r, column c)`` of a stripe lives on child ``c`` at sector
``data_start + start_row + r``.
"""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .vdev import LABEL_SECTORS, DeviceIOError

MIN_WIDTH = 2
MAX_WIDTH = 16


class RaidzError(Exception):
    pass


class UnrecoverableRow(RaidzError):
    """Two or more cells of one row are unreadable."""


class PermanentError(RaidzError):
    """No single-child reconstruction reproduces the expected checksum."""


@dataclass(frozen=True)
class Row:
    parity_slot: int
    data_slots: tuple


@dataclass(frozen=True)
class StripeMap:
    start_row: int
    width: int
    rows: tuple
    data_sectors: int
    parity_sectors: int
    skip_sectors: int
    skip_cells: tuple = ()

    @property
    def total_sectors(self) -> int:
        return self.data_sectors + self.parity_sectors + self.skip_sectors

    @property
    def nrows(self) -> int:
        """Rows consumed on the children, including a row opened only by skip."""
        last = max([len(self.rows)] + [r + 1 for r, _ in self.skip_cells])
        return last

    def column_rows(self, col: int) -> int:
        """Number of leading rows in which column ``col`` holds parity or data."""
        if col == 0:
            return len(self.rows)
        full = len(self.rows) - 1
        last = self.rows[-1]
        return full + (1 if col <= len(last.data_slots) else 0)

    def cells_used(self, row: int) -> int:
        return 1 + len(self.rows[row].data_slots)


@dataclass
class RaidzGeometry:
    """Ordered children of one RAID-Z1 vdev. ``None`` marks a missing child."""

    children: list
    sector_size: int
    capacity_sectors: int

    def __post_init__(self):
        d = len(self.children)
        if not MIN_WIDTH <= d <= MAX_WIDTH:
            raise ValueError(f"RAID-Z needs 2..16 children, got {d}")
        for dev in self.children:
            if dev is None:
                continue
            if dev.sector_size != self.sector_size or dev.capacity_sectors != self.capacity_sectors:
                raise ValueError("children differ in sector size or capacity")

    @property
    def width(self) -> int:
        return len(self.children)

    @property
    def data_start(self) -> int:
        return LABEL_SECTORS

    @property
    def data_rows(self) -> int:
        return self.capacity_sectors - 2 * LABEL_SECTORS


def parity_sectors_for(s: int, d: int) -> int:
    return -(-s // (d - 1))


def allocated_sectors(s: int, d: int) -> int:
    total = s + parity_sectors_for(s, d)
    return total + (total & 1)


def plan_stripe(s: int, d, start_row: int = 0) -> StripeMap:
    """Placement plan for ``s`` data sectors over a ``d``-wide vdev.

    ``d`` may be the width or a :class:`RaidzGeometry`.
    """
    if isinstance(d, RaidzGeometry):
        d = d.width
    if s < 1:
        raise ValueError("a stripe needs at least one data sector")
    if not MIN_WIDTH <= d <= MAX_WIDTH:
        raise ValueError(f"width {d} outside 2..16")
    per_row = d - 1
    rows = []
    left = s
    while left:
        k = min(per_row, left)
        rows.append(Row(0, tuple(range(1, k + 1))))
        left -= k
    p = len(rows)
    skip = (s + p) & 1
    skip_cells = ()
    if skip:
        last_used = 1 + len(rows[-1].data_slots)
        if last_used < d:
            skip_cells = ((len(rows) - 1, last_used),)
        else:
            skip_cells = ((len(rows), 0),)
    return StripeMap(start_row, d, tuple(rows), s, p, skip, skip_cells)


def compute_parity(sectors) -> bytes:
    """Bytewise XOR of one row's data sectors."""
    sectors = list(sectors)
    if not sectors:
        raise ValueError("parity of an empty row")
    grid = np.stack([np.frombuffer(bytes(x), dtype=np.uint8) for x in sectors])[None, :, :]
    return _kernels.xor_parity(grid)[0].tobytes()


def reconstruct_row(sectors, missing: int) -> bytes:
    """Rebuild ``sectors[missing]`` (which may be None) from the rest of the row."""
    present = [x for i, x in enumerate(sectors) if i != missing]
    if any(x is None for x in present):
        raise UnrecoverableRow("more than one sector missing from row")
    return compute_parity(present)


def _layout_grid(smap: StripeMap, data: bytes, ss: int) -> np.ndarray:
    d = smap.width
    nrows = len(smap.rows)
    grid = np.zeros((nrows, d, ss), dtype=np.uint8)
    flat = grid[:, 1:, :].reshape(-1, ss)
    flat[:smap.data_sectors] = np.frombuffer(data, dtype=np.uint8).reshape(-1, ss)
    grid[:, 1:, :] = flat.reshape(nrows, d - 1, ss)
    grid[:, 0, :] = _kernels.xor_parity(grid[:, 1:, :])
    return grid


def _data_of(smap: StripeMap, grid: np.ndarray) -> bytes:
    ss = grid.shape[2]
    return grid[:, 1:, :].reshape(-1, ss)[:smap.data_sectors].tobytes()


def write_block(geom: RaidzGeometry, smap: StripeMap, data) -> dict:
    """Full-stripe write of data, fresh parity, and zeroed skip sectors.

    Child I/O errors do not stop the other children; they are returned as
    ``{child_index: exception}``. Missing children are reported the same way.
    """
    ss = geom.sector_size
    if len(data) != smap.data_sectors * ss:
        raise ValueError(f"block is {len(data)} bytes, map wants {smap.data_sectors * ss}")
    grid = _layout_grid(smap, bytes(data), ss)
    base = geom.data_start + smap.start_row
    errors = {}
    zero = bytes(ss)
    for col, dev in enumerate(geom.children):
        nrows = smap.column_rows(col)
        payload = grid[:nrows, col, :].tobytes()
        skip_rows = [r for r, c in smap.skip_cells if c == col]
        try:
            if dev is None:
                raise DeviceIOError(f"child {col} missing")
            if nrows:
                dev.write_sectors(base, payload)
            for r in skip_rows:
                dev.write_sectors(base + r, zero)
        except DeviceIOError as exc:
            errors[col] = exc
    return errors


@dataclass
class StripeRead:
    grid: np.ndarray
    missing: set
    data: bytes

    @property
    def degraded(self) -> bool:
        return bool(self.missing)


def _read_columns(geom: RaidzGeometry, smap: StripeMap):
    ss = geom.sector_size
    grid = np.zeros((len(smap.rows), smap.width, ss), dtype=np.uint8)
    base = geom.data_start + smap.start_row
    missing = set()
    for col, dev in enumerate(geom.children):
        nrows = smap.column_rows(col)
        if not nrows:
            continue
        if dev is None:
            missing.add(col)
            continue
        try:
            raw = dev.read_sectors(base, nrows)
        except DeviceIOError:
            missing.add(col)
            continue
        grid[:nrows, col, :] = np.frombuffer(raw, dtype=np.uint8).reshape(nrows, ss)
    return grid, missing


def _rebuild_column(smap: StripeMap, grid: np.ndarray, col: int) -> np.ndarray:
    """Grid copy with column ``col`` recomputed from the other columns."""
    out = grid.copy()
    others = [c for c in range(smap.width) if c != col]
    rebuilt = _kernels.xor_parity(grid[:, others, :])
    nrows = smap.column_rows(col)
    out[:nrows, col, :] = rebuilt[:nrows]
    return out


def read_stripe(geom: RaidzGeometry, smap: StripeMap) -> StripeRead:
    grid, missing = _read_columns(geom, smap)
    for r in range(len(smap.rows)):
        used = set(range(smap.cells_used(r)))
        if len(used & missing) >= 2:
            raise UnrecoverableRow(
                f"row {smap.start_row + r}: children {sorted(used & missing)} unreadable")
    data_missing = [c for c in missing if c != 0 and smap.column_rows(c)]
    for col in data_missing:
        grid = _rebuild_column(smap, grid, col)
    return StripeRead(grid, missing, _data_of(smap, grid))


def read_block(geom: RaidzGeometry, smap: StripeMap) -> StripeRead:
    """Read a stripe; with one unreadable child the data is rebuilt and flagged."""
    return read_stripe(geom, smap)


@dataclass
class RepairResult:
    data: bytes
    repaired_child: int | None = None
    degraded: bool = False
    rewrite_failed: bool = False


def _rewrite_column(geom: RaidzGeometry, smap: StripeMap, grid: np.ndarray, col: int) -> bool:
    dev = geom.children[col]
    nrows = smap.column_rows(col)
    if dev is None or not nrows:
        return False
    try:
        dev.write_sectors(geom.data_start + smap.start_row, grid[:nrows, col, :].tobytes())
    except DeviceIOError:
        return False
    return True


def verify_and_repair(geom: RaidzGeometry, smap: StripeMap, expected: bytes,
                      checksum_fn, read: StripeRead | None = None) -> RepairResult:
    """Return data whose checksum equals ``expected``, repairing one bad child.

    Each child in turn is treated as failed and rebuilt from the others; the
    first candidate that verifies wins and is written back in place.
    """
    if read is None:
        read = read_stripe(geom, smap)
    if checksum_fn(read.data) == expected:
        return RepairResult(read.data, None, read.degraded)
    if read.missing:
        # an unreadable child plus a silently bad one exceeds single parity
        raise PermanentError("checksum mismatch on a degraded stripe")
    for col in range(smap.width):
        if not smap.column_rows(col) or col == 0:
            continue
        candidate = _rebuild_column(smap, read.grid, col)
        data = _data_of(smap, candidate)
        if checksum_fn(data) == expected:
            ok = _rewrite_column(geom, smap, candidate, col)
            return RepairResult(data, col, False, rewrite_failed=not ok)
    raise PermanentError(f"no reconstruction of stripe at row {smap.start_row} verifies")


def check_parity(geom: RaidzGeometry, smap: StripeMap, read: StripeRead) -> bool:
    """Rewrite parity and skip cells that disagree with verified data.

    Returns True when something had to be rewritten.
    """
    grid = read.grid
    fresh = _kernels.xor_parity(grid[:, 1:, :])
    fixed = False
    if 0 not in read.missing and not np.array_equal(fresh, grid[:, 0, :]):
        repaired = grid.copy()
        repaired[:, 0, :] = fresh
        _rewrite_column(geom, smap, repaired, 0)
        fixed = True
    ss = geom.sector_size
    base = geom.data_start + smap.start_row
    for r, c in smap.skip_cells:
        dev = geom.children[c]
        if dev is None:
            continue
        try:
            raw = dev.read_sectors(base + r, 1)
            if raw.count(0) != ss:
                dev.write_sectors(base + r, bytes(ss))
                fixed = True
        except DeviceIOError:
            continue
    return fixed
