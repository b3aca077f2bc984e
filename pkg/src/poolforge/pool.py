"""Copy-on-write transactional storage pool over one RAID-Z1 vdev.

Blocks are written only while a transaction group syncs; a sync ends by
writing a new uberblock into ring slot ``txg % 128`` of both label copies on
every live child. A txg is authoritative on import only when every label copy
of every child that took part in it carries it, so the final uberblock write
is the single commit point.
Blocks displaced during a sync return to the free map only after the commit,
which keeps the previous state intact until the new one is durable.
"""

import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass

from . import codec, raidz
from .blockref import TYPE_CATALOG, TYPE_DATA, TYPE_META, BlockRef, decode_many, hole
from .spacemap import DoubleFree, FreeSpaceMap, OutOfSpace
from .vdev import (LABEL_SECTORS, RING_SLOTS, DeviceIOError, Label, UnlabeledDevice,
                   encode_slot, read_label, read_label_copies, write_label, write_uberblock_slot)

log = logging.getLogger(__name__)

RECORD_SIZE_MAX = 128 * 1024
DEFAULT_CACHE_BYTES = 16 * 1024 * 1024
CATALOG_LEAF_SIZE = 128 * 1024

# pool_guid, timestamp_ms, child_count, present_mask, catalog_root
_UBER = struct.Struct("<16sQII64s")

FREED_NOW = "freed-now"
DEFERRED = "deferred-to-deadlist"


class PoolError(Exception):
    pass


class PoolCorrupt(PoolError):
    pass


class CommitAborted(PoolError):
    pass


class ChecksumError(PoolError):
    """A block failed verification and could not be repaired."""


@dataclass
class Uberblock:
    txg: int
    catalog_root: BlockRef
    timestamp: int
    pool_guid: bytes
    child_count: int
    present_mask: int  # bit c set: child c received this uberblock

    def payload(self) -> bytes:
        return _UBER.pack(self.pool_guid, self.timestamp, self.child_count,
                          self.present_mask, self.catalog_root.encode())

    @classmethod
    def from_payload(cls, txg: int, payload: bytes) -> "Uberblock":
        guid, ts, count, mask, root = _UBER.unpack_from(payload)
        return cls(txg, BlockRef.decode(root), ts, guid, count, mask)


@dataclass
class ScrubReport:
    blocks_examined: int = 0
    checksum_errors_found: int = 0
    repaired: int = 0
    permanent_errors: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class BlockCache:
    """Strict-LRU cache of verified logical block contents."""

    def __init__(self, capacity: int = DEFAULT_CACHE_BYTES):
        self.capacity = capacity
        self._items = OrderedDict()
        self.bytes = 0
        self.evicted_bytes = 0
        self.hits = 0
        self.misses = 0

    def get(self, key):
        data = self._items.get(key)
        if data is None:
            self.misses += 1
            return None
        self._items.move_to_end(key)
        self.hits += 1
        return data

    def put(self, key, data: bytes) -> None:
        if len(data) > self.capacity:
            return
        old = self._items.pop(key, None)
        if old is not None:
            self.bytes -= len(old)
        self._items[key] = data
        self.bytes += len(data)
        while self.bytes > self.capacity:
            _, victim = self._items.popitem(last=False)
            self.bytes -= len(victim)
            self.evicted_bytes += len(victim)

    def discard_row(self, row: int) -> None:
        for key in [k for k in self._items if k[0] == row]:
            self.bytes -= len(self._items.pop(key))

    def clear(self) -> None:
        self._items.clear()
        self.bytes = 0


class Pool:
    def __init__(self, name: str, guid: bytes, geometry: raidz.RaidzGeometry,
                 cache_bytes: int = DEFAULT_CACHE_BYTES, durable: bool = False, clock=None):
        self.name = name
        self.guid = guid
        self.geometry = geometry
        self.txg = 0
        self.timestamp = 0
        self.freemap = FreeSpaceMap(geometry.data_rows)
        self.pending_frees = []
        self._pending_rows = set()
        self.cache = BlockCache(cache_bytes)
        self._indirects = OrderedDict()
        self.durable = durable
        self.clock = clock or (lambda: 0)
        self.catalog_root = hole(0, 0, TYPE_CATALOG)
        self.catalog = None
        self._catalog_blob = None  # encoded catalog of the committed txg
        self.degraded = False
        self.scrub_errors = 0
        self.bytes_logical_written = 0

    # ------------------------------------------------------------ geometry

    @property
    def width(self) -> int:
        return self.geometry.width

    @property
    def sector_size(self) -> int:
        return self.geometry.sector_size

    @property
    def devices(self) -> list:
        return self.geometry.children

    @property
    def open_txg(self) -> int:
        return self.txg + 1

    @property
    def row_bytes(self) -> int:
        return self.width * self.sector_size

    @property
    def data_capacity_bytes(self) -> int:
        return self.geometry.data_rows * self.row_bytes

    def free_bytes(self) -> int:
        return self.freemap.free_rows() * self.row_bytes

    def stripe_map(self, ref: BlockRef) -> raidz.StripeMap:
        return raidz.plan_stripe(ref.physical_sectors, self.width, ref.vdev_start_row)

    def rows_of(self, ref: BlockRef) -> int:
        return self.stripe_map(ref).nrows

    def asize(self, ref: BlockRef) -> int:
        """Bytes of whole rows the block occupies on the vdev."""
        return 0 if ref.hole else self.rows_of(ref) * self.row_bytes

    # ------------------------------------------------------------ allocation

    def alloc(self, sectors_needed: int) -> int:
        """First-fit row-aligned allocation of ``sectors_needed`` (parity+skip included)."""
        nrows = -(-sectors_needed // self.width)
        return self.freemap.alloc(nrows)

    def free_block(self, ref: BlockRef, latest_snapshot_txg: int) -> str:
        """Free now, or leave the block to the deadlist of a pinning snapshot.

        "Freed now" blocks go back to the free map when the open txg commits.
        """
        if ref.hole:
            raise ValueError("cannot free a hole")
        if ref.birth_txg > latest_snapshot_txg:
            row = ref.vdev_start_row
            if row in self._pending_rows or self.freemap.is_free(row, 1):
                raise DoubleFree(f"block at row {row} freed twice")
            self.pending_frees.append(ref)
            self._pending_rows.add(row)
            return FREED_NOW
        return DEFERRED

    def _release_pending(self) -> None:
        for ref in self.pending_frees:
            self.freemap.free(ref.vdev_start_row, self.rows_of(ref))
            self._indirects.pop((ref.vdev_start_row, ref.checksum), None)
        self.pending_frees = []
        self._pending_rows = set()

    # ------------------------------------------------------------ block I/O

    def write_logical_block(self, data, block_type: int = TYPE_DATA, level: int = 0,
                            compress: bool = True) -> BlockRef:
        data = bytes(data)
        if not data or len(data) > RECORD_SIZE_MAX:
            raise ValueError(f"logical block of {len(data)} bytes outside 1..{RECORD_SIZE_MAX}")
        comp, physical = codec.encode_physical(data, self.sector_size, compress)
        self.bytes_logical_written += len(data)
        return self.write_physical(physical, comp, len(data), block_type, level)

    def write_physical(self, physical: bytes, compression: int, logical_size: int,
                       block_type: int = TYPE_DATA, level: int = 0) -> BlockRef:
        """Place already-encoded, sector-padded bytes."""
        physical = codec.pad_to_sectors(bytes(physical), self.sector_size)
        cksum = codec.checksum256(physical)
        s = len(physical) // self.sector_size
        total = raidz.allocated_sectors(s, self.width)
        start = self.alloc(total)
        smap = raidz.plan_stripe(s, self.width, start)
        errors = raidz.write_block(self.geometry, smap, physical)
        if len(errors) > 1:
            self.freemap.free(start, smap.nrows)
            raise DeviceIOError(f"write failed on children {sorted(errors)}")
        return BlockRef(start, logical_size, s, compression, cksum, self.open_txg,
                        level, block_type)

    def _verified_physical(self, ref: BlockRef) -> bytes:
        smap = self.stripe_map(ref)
        try:
            result = raidz.verify_and_repair(self.geometry, smap, ref.checksum,
                                             codec.checksum256)
        except (raidz.PermanentError, raidz.UnrecoverableRow) as exc:
            raise ChecksumError(f"block at row {ref.vdev_start_row}: {exc}") from exc
        if result.repaired_child is not None:
            log.warning("repaired block at row %d from child %d", ref.vdev_start_row,
                        result.repaired_child)
        return result.data

    def read_physical(self, ref: BlockRef) -> bytes:
        """Verified physical (possibly compressed, padded) bytes of a block."""
        if ref.hole:
            raise ValueError("hole has no physical bytes")
        return self._verified_physical(ref)

    def read_logical_block(self, ref: BlockRef) -> bytes:
        if ref.hole:
            return bytes(ref.logical_size)
        key = (ref.vdev_start_row, ref.checksum)
        data = self.cache.get(key)
        if data is not None:
            return data
        physical = self._verified_physical(ref)
        try:
            data = codec.decode_physical(ref.compression, physical, ref.logical_size)
        except codec.CorruptStream as exc:
            raise ChecksumError(f"block at row {ref.vdev_start_row}: {exc}") from exc
        self.cache.put(key, data)
        return data

    def read_indirect(self, ref: BlockRef) -> list:
        key = (ref.vdev_start_row, ref.checksum)
        kids = self._indirects.get(key)
        if kids is None:
            kids = decode_many(self.read_logical_block(ref))
            self._indirects[key] = kids
            if len(self._indirects) > 4096:
                self._indirects.popitem(last=False)
        else:
            self._indirects.move_to_end(key)
        return kids

    # ------------------------------------------------------------ commit

    def _live_children(self) -> list:
        return [(i, d) for i, d in enumerate(self.devices) if d is not None and not d.offline]

    def _flush(self) -> None:
        if self.durable:
            for _, dev in self._live_children():
                dev.fsync()

    def _write_uberblocks(self, ub: Uberblock) -> None:
        slot = encode_slot(ub.txg, ub.payload())
        live = self._live_children()
        for copy in (0, 1):
            for _, dev in live:
                write_uberblock_slot(dev, ub.txg, slot, copy)

    def commit_txg(self, snapshots=()) -> int:
        """Sync dirty state as txg ``self.txg + 1`` and make it authoritative.

        ``snapshots`` is a list of ``(dataset, name)`` pinned inside this txg.
        On any failure the on-disk state stays at the previous txg and the
        in-memory catalog is reloaded from it.
        """
        txg = self.open_txg
        saved_free = self.freemap.copy()
        saved_pending = list(self.pending_frees)
        old_catalog_blocks = self._catalog_blocks()
        try:
            blob = self.catalog.sync(txg, snapshots)
            for ref in old_catalog_blocks:
                self.free_block(ref, 0)
            from .tree import write_blob
            root = write_blob(self, blob, CATALOG_LEAF_SIZE, TYPE_CATALOG)
            self._flush()
            mask = sum(1 << i for i, _ in self._live_children())
            ub = Uberblock(txg, root, self.clock(), self.guid, self.width, mask)
            self._write_uberblocks(ub)
            self._flush()
        except Exception as exc:
            self.freemap = saved_free
            self.pending_frees = saved_pending
            self._pending_rows = {r.vdev_start_row for r in saved_pending}
            self._reload_committed()
            if isinstance(exc, (DeviceIOError, OutOfSpace)):
                raise CommitAborted(f"txg {txg} aborted: {exc}") from exc
            raise
        self.txg = txg
        self.timestamp = ub.timestamp
        self.catalog_root = root
        self._catalog_blob = blob
        self._release_pending()
        return txg

    def _catalog_blocks(self) -> list:
        if self.catalog_root.hole:
            return []
        from .tree import tree_brefs
        return tree_brefs(self, self.catalog_root, CATALOG_LEAF_SIZE, TYPE_CATALOG)

    def _reload_committed(self) -> None:
        from .dataset import Catalog
        if self.catalog_root.hole:
            self.catalog = Catalog(self)
            return
        if self._catalog_blob is None:
            self._catalog_blob = self._read_catalog_blob()
        self.catalog = Catalog.load(self, self._catalog_blob)

    def _read_catalog_blob(self) -> bytes:
        from .tree import read_blob
        return read_blob(self, self.catalog_root, CATALOG_LEAF_SIZE, TYPE_CATALOG)

    # ------------------------------------------------------------ traversal

    def walk_live(self, visit, read=None) -> None:
        """Visit every live block once (catalog tree, heads, snapshots)."""
        seen = set()

        def once(ref):
            if ref.vdev_start_row in seen:
                return False
            seen.add(ref.vdev_start_row)
            return visit(ref)

        from .tree import BlockTree
        BlockTree(self, self.catalog_root, CATALOG_LEAF_SIZE, TYPE_CATALOG).walk(once, read)
        self.catalog.walk(once, read)

    def allocated_extents(self) -> list:
        out = []
        self.walk_live(lambda ref: out.append((ref.vdev_start_row, self.rows_of(ref))) or True)
        return out

    def rebuild_freemap(self) -> None:
        self.freemap = FreeSpaceMap.from_allocated(self.geometry.data_rows,
                                                   self.allocated_extents())

    def check_space(self) -> None:
        """Raise unless live blocks and the free map tile the data region exactly."""
        expected = FreeSpaceMap.from_allocated(self.geometry.data_rows,
                                               self.allocated_extents())
        if expected.extents != self.freemap.extents:
            raise PoolCorrupt("free map does not match live block reachability")

    # ------------------------------------------------------------ scrub

    def scrub(self) -> ScrubReport:
        report = ScrubReport()
        verified = {}

        def visit(ref):
            report.blocks_examined += 1
            smap = self.stripe_map(ref)
            try:
                read = raidz.read_stripe(self.geometry, smap)
                found = codec.checksum256(read.data) != ref.checksum
                result = raidz.verify_and_repair(self.geometry, smap, ref.checksum,
                                                 codec.checksum256, read)
            except (raidz.PermanentError, raidz.UnrecoverableRow):
                report.checksum_errors_found += 1
                report.permanent_errors += 1
                return False
            if found:
                report.checksum_errors_found += 1
                report.repaired += 1
                read = raidz.read_stripe(self.geometry, smap)
            elif raidz.check_parity(self.geometry, smap, read):
                report.checksum_errors_found += 1
                report.repaired += 1
            if ref.level > 0 or ref.block_type == TYPE_META:
                verified[ref.vdev_start_row] = codec.decode_physical(
                    ref.compression, result.data, ref.logical_size)
            return True

        def read(ref):
            return verified.pop(ref.vdev_start_row)

        self.walk_live(visit, read)
        self.scrub_errors += report.permanent_errors
        return report

    # ------------------------------------------------------------ lifecycle

    def close(self) -> None:
        for dev in self.devices:
            if dev is not None:
                dev.close()

    export = close

    def status(self) -> dict:
        present = sum(dev is not None and not dev.offline for dev in self.devices)
        return {
            "name": self.name,
            "guid": self.guid.hex(),
            "width": self.width,
            "sector_size": self.sector_size,
            "txg": self.txg,
            "state": "degraded" if self.degraded or present < self.width else "healthy",
            "data_capacity_bytes": self.data_capacity_bytes,
            "free_bytes": self.free_bytes(),
            "datasets": sorted(self.catalog.datasets) if self.catalog else [],
        }


def _check_geometry(devices) -> tuple:
    sizes = {d.sector_size for d in devices}
    caps = {d.capacity_sectors for d in devices}
    if len(sizes) != 1:
        raise PoolError("devices have mixed sector sizes")
    if len(caps) != 1:
        raise PoolError("devices have mixed capacities")
    return sizes.pop(), caps.pop()


def create_pool(devices, name: str, force: bool = False, guid: bytes | None = None,
                cache_bytes: int = DEFAULT_CACHE_BYTES, durable: bool = False,
                clock=None) -> Pool:
    devices = list(devices)
    if len(devices) < raidz.MIN_WIDTH:
        raise PoolError("RAID-Z needs at least 2 devices")
    if len(devices) > raidz.MAX_WIDTH:
        raise PoolError("RAID-Z supports at most 16 devices")
    ss, cap = _check_geometry(devices)
    if not force:
        for dev in devices:
            try:
                read_label(dev)
            except UnlabeledDevice:
                continue
            raise PoolError(f"{dev.path} is already labeled; use force to overwrite")
    guid = guid if guid is not None else os.urandom(16)
    geom = raidz.RaidzGeometry(devices, ss, cap)
    pool = Pool(name, guid, geom, cache_bytes, durable, clock)
    for idx, dev in enumerate(devices):
        write_label(dev, Label(guid, dev.device_guid, idx, len(devices), ss, cap, name))
    from .dataset import Catalog
    pool.catalog = Catalog(pool)
    pool.commit_txg()
    return pool


def _authoritative_txg(labeled: list):
    """Highest txg held by every label copy of every child it was written to.

    ``labeled`` is ``[(child_index, [Label, ...]), ...]``. The uberblock's
    present mask names the children that took part in its commit, so a child
    that was offline then does not veto it, while a commit cut short by a
    crash is missing from some participant's copy and is rejected.
    """
    rings = [(idx, c.valid_slots()) for idx, copies in labeled for c in copies]
    for txg in sorted({t for _, r in rings for t in r}, reverse=True):
        payloads = {r[txg] for _, r in rings if txg in r}
        if len(payloads) != 1:
            continue
        payload = payloads.pop()
        mask = Uberblock.from_payload(txg, payload).present_mask
        if all(txg in r for idx, r in rings if mask >> idx & 1):
            return txg, payload
    return None


def import_pool(devices, cache_bytes: int = DEFAULT_CACHE_BYTES, durable: bool = False,
                clock=None) -> Pool:
    """Assemble a pool from labeled devices (one child may be absent)."""
    labeled = []
    for dev in devices:
        if dev is None:
            continue
        if dev.offline:  # imported as a missing child
            dev.close()
            continue
        copies = [c for c in read_label_copies(dev) if c is not None]
        if not copies:
            raise UnlabeledDevice(f"unlabeled device: {dev.path}")
        labeled.append((dev, copies))
    if not labeled:
        raise PoolError("no devices to import")
    guids = {copies[0].pool_guid for _, copies in labeled}
    if len(guids) != 1:
        raise PoolError("devices belong to different pools")
    first = labeled[0][1][0]
    width = first.child_count
    children = [None] * width
    for dev, copies in labeled:
        idx = copies[0].child_index
        if idx >= width or children[idx] is not None:
            raise PoolError(f"bad or duplicate child index {idx}")
        children[idx] = dev
    missing = children.count(None)
    if missing >= 2:
        raise PoolError(f"cannot import: {missing} of {width} children missing")
    present = [d for d in children if d is not None]
    ss, cap = _check_geometry(present)
    found = _authoritative_txg([(copies[0].child_index, copies) for _, copies in labeled])
    if found is None:
        raise PoolCorrupt("no valid uberblock")
    txg, payload = found
    ub = Uberblock.from_payload(txg, payload)
    geom = raidz.RaidzGeometry(children, ss, cap)
    pool = Pool(first.pool_name, first.pool_guid, geom, cache_bytes, durable, clock)
    pool.txg = txg
    pool.timestamp = ub.timestamp
    pool.catalog_root = ub.catalog_root
    pool.degraded = missing == 1
    pool._reload_committed()
    pool.rebuild_freemap()
    return pool
