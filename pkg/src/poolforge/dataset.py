"""Datasets, snapshots and clones on a pool.

A dataset's state is an object set: a tree of 16 KiB meta leaves, each
holding 128 fixed-size object entries (size plus block-tree root). Object
data lives in per-object block trees of ``record_size`` leaves. All-zero
records are stored as holes.

Snapshots pin a meta root at a txg. When the head displaces a block the
birth-txg rule decides its fate: born after the newest snapshot means it is
freed, otherwise it goes on that snapshot's deadlist.
"""

import hashlib
import struct
from dataclasses import dataclass, field

from .blockref import BREF_SIZE, TYPE_DATA, TYPE_META, BlockRef, hole
from .pool import DEFERRED, RECORD_SIZE_MAX, Pool
from .tree import BlockTree

META_LEAF_SIZE = 16 * 1024
DNODE_SIZE = 128
DNODES_PER_LEAF = META_LEAF_SIZE // DNODE_SIZE
DNODE_IN_USE = 0x1
DEFAULT_RECORD_SIZE = 128 * 1024

_DNODE = struct.Struct("<IIQ64s")
CATALOG_MAGIC = b"PFCATL01"
CATALOG_VERSION = 1


class DatasetError(Exception):
    pass


class ReadOnlyError(DatasetError):
    pass


class NameInUse(DatasetError):
    pass


class NoSuchObject(DatasetError, KeyError):
    pass


class HasDependents(DatasetError):
    pass


class ObjectState:
    __slots__ = ("size", "tree")

    def __init__(self, size: int, tree: BlockTree):
        self.size = size
        self.tree = tree


class ObjectSet:
    """Objects of one dataset head or snapshot."""

    def __init__(self, pool: Pool, meta_root: BlockRef, record_size: int, readonly: bool = False):
        self.pool = pool
        self.record_size = record_size
        self.readonly = readonly
        self.meta = BlockTree(pool, meta_root, META_LEAF_SIZE, TYPE_META)
        self._objects = {}
        self._dirty = set()
        self._zero = bytes(record_size)

    @property
    def root(self) -> BlockRef:
        return self.meta.root

    @property
    def dirty(self) -> bool:
        return bool(self._dirty)

    def _load(self, oid: int):
        st = self._objects.get(oid)
        if st is not None:
            return st
        leaf = self.meta.read_leaf(oid // DNODES_PER_LEAF)
        if leaf is None:
            return None
        flags, _, size, raw = _DNODE.unpack_from(leaf, (oid % DNODES_PER_LEAF) * DNODE_SIZE)
        if not flags & DNODE_IN_USE:
            return None
        st = ObjectState(size, BlockTree(self.pool, BlockRef.decode(raw), self.record_size,
                                         TYPE_DATA))
        self._objects[oid] = st
        return st

    def object(self, oid: int) -> ObjectState:
        st = self._load(oid)
        if st is None:
            raise NoSuchObject(oid)
        return st

    def exists(self, oid: int) -> bool:
        return self._load(oid) is not None

    def dnodes_in_leaf(self, leaf: bytes, leaf_idx: int):
        for slot in range(DNODES_PER_LEAF):
            flags, _, size, raw = _DNODE.unpack_from(leaf, slot * DNODE_SIZE)
            if flags & DNODE_IN_USE:
                yield leaf_idx * DNODES_PER_LEAF + slot, size, BlockRef.decode(raw)

    def object_ids(self) -> list:
        ids = set(self._objects)
        for leaf_idx, ref in self.meta.iter_leaves():
            leaf = self.pool.read_logical_block(ref)
            ids.update(oid for oid, _, _ in self.dnodes_in_leaf(leaf, leaf_idx))
        return sorted(ids)

    # ---------------------------------------------------------------- I/O

    def read(self, oid: int, offset: int, length: int) -> bytes:
        st = self.object(oid)
        end = min(offset + length, st.size)
        if offset >= end:
            return b""
        rs = self.record_size
        out = bytearray()
        pos = offset
        while pos < end:
            idx, within = divmod(pos, rs)
            n = min(rs - within, end - pos)
            leaf = st.tree.read_leaf(idx)
            out += leaf[within:within + n] if leaf is not None else bytes(n)
            pos += n
        return bytes(out)

    def _writable(self) -> None:
        if self.readonly:
            raise ReadOnlyError("snapshots are read-only")

    def _create(self, oid: int) -> ObjectState:
        st = ObjectState(0, BlockTree(self.pool, hole(0), self.record_size, TYPE_DATA))
        self._objects[oid] = st
        return st

    def write(self, oid: int, offset: int, data) -> None:
        self._writable()
        if oid < 0 or offset < 0:
            raise ValueError("object id and offset must be non-negative")
        st = self._load(oid) or self._create(oid)
        data = memoryview(bytes(data))
        rs = self.record_size
        end = offset + len(data)
        pos = offset
        while pos < end:
            idx, within = divmod(pos, rs)
            n = min(rs - within, end - pos)
            chunk = data[pos - offset:pos - offset + n]
            if n == rs:
                block = bytes(chunk)
            else:
                cur = st.tree.read_leaf(idx)
                buf = bytearray(cur if cur is not None else self._zero)
                buf[within:within + n] = chunk
                block = bytes(buf)
            st.tree.set_leaf(idx, None if block == self._zero else block)
            pos += n
        st.size = max(st.size, end)
        self._dirty.add(oid)

    def truncate(self, oid: int, size: int) -> None:
        self._writable()
        st = self._load(oid) or self._create(oid)
        rs = self.record_size
        if size < st.size:
            st.tree.free_range(-(-size // rs))
            within = size % rs
            if within:
                cur = st.tree.read_leaf(size // rs)
                if cur is not None:
                    block = cur[:within] + bytes(rs - within)
                    st.tree.set_leaf(size // rs, None if block == self._zero else block)
        st.size = size
        self._dirty.add(oid)

    def apply_object(self, oid: int, size: int) -> None:
        """Set an object's size as a send stream's OBJECT record demands."""
        st = self._load(oid)
        if st is None:
            st = self._create(oid)
            st.size = size
            self._dirty.add(oid)
        elif st.size != size:
            self.truncate(oid, size)

    def set_record(self, oid: int, idx: int, data) -> None:
        self._writable()
        st = self._load(oid) or self._create(oid)
        st.tree.set_leaf(idx, None if data is None or data == self._zero else data)
        self._dirty.add(oid)

    def free_records(self, oid: int, lo: int, hi: int | None) -> None:
        self._writable()
        st = self._load(oid) or self._create(oid)
        st.tree.free_range(lo, hi)
        self._dirty.add(oid)

    # --------------------------------------------------------------- sync

    def sync(self, txg: int, displace) -> BlockRef:
        for oid in sorted(self._dirty):
            st = self._objects[oid]
            root, displaced = st.tree.sync(txg)
            for ref in displaced:
                displace(ref)
            leaf_idx, slot = divmod(oid, DNODES_PER_LEAF)
            leaf = bytearray(self.meta.read_leaf(leaf_idx) or bytes(META_LEAF_SIZE))
            entry = _DNODE.pack(DNODE_IN_USE, 0, st.size, root.encode())
            leaf[slot * DNODE_SIZE:slot * DNODE_SIZE + len(entry)] = entry
            self.meta.set_leaf(leaf_idx, bytes(leaf))
        self._dirty.clear()
        root, displaced = self.meta.sync(txg)
        for ref in displaced:
            displace(ref)
        return root

    def walk(self, visit, read=None) -> None:
        """Every non-hole bref of the object set; ``visit`` False prunes."""
        pool = self.pool

        def meta_visit(ref):
            if not visit(ref):
                return False
            if ref.level == 0:
                leaf = read(ref) if read else pool.read_logical_block(ref)
                base = 0
                for oid, _, root in self.dnodes_in_leaf(leaf, base):
                    BlockTree(pool, root, self.record_size, TYPE_DATA).walk(visit, read)
            return True

        self.meta.walk(meta_visit, read)


@dataclass
class SnapshotRef:
    name: str
    txg: int
    guid: bytes
    root: BlockRef
    dataset: str
    record_size: int
    deadlist: list = field(default_factory=list)

    @property
    def full_name(self) -> str:
        return f"{self.dataset}@{self.name}"

    def view(self, pool: Pool) -> ObjectSet:
        return ObjectSet(pool, self.root, self.record_size, readonly=True)


@dataclass
class Dataset:
    pool: Pool
    name: str
    guid: bytes
    record_size: int
    head: ObjectSet
    snapshots: list = field(default_factory=list)
    origin: SnapshotRef | None = None

    @property
    def head_root(self) -> BlockRef:
        return self.head.root

    def snapshot_named(self, name: str) -> SnapshotRef:
        for snap in self.snapshots:
            if snap.name == name:
                return snap
        raise KeyError(f"{self.name}@{name}")

    def latest_pin(self):
        """Newest snapshot pinning head blocks: own newest, else the clone origin."""
        if self.snapshots:
            return self.snapshots[-1]
        return self.origin

    def lineage(self) -> list:
        chain = []
        if self.origin is not None:
            parent = self.pool.catalog.datasets.get(self.origin.dataset)
            if parent is not None:
                chain = [s for s in parent.lineage() if s.txg <= self.origin.txg]
        return chain + list(self.snapshots)

    def unmodified_since(self, snap: SnapshotRef) -> bool:
        return not self.head.dirty and self.head.root == snap.root

    def _displace(self, ref: BlockRef) -> None:
        pin = self.latest_pin()
        disposition = self.pool.free_block(ref, pin.txg if pin is not None else 0)
        if disposition == DEFERRED and pin is not None and pin.dataset == self.name:
            pin.deadlist.append(ref)
        # deferred against a clone origin: the origin's dataset owns the block

    def sync(self, txg: int) -> None:
        self.head.sync(txg, self._displace)


class Catalog:
    """All datasets of a pool; serialized into the pool's catalog tree."""

    def __init__(self, pool: Pool):
        self.pool = pool
        self.datasets = {}

    def snapshot_by_guid(self, guid: bytes):
        for ds in self.datasets.values():
            for snap in ds.snapshots:
                if snap.guid == guid:
                    return ds, snap
        return None

    def clones_of(self, snap: SnapshotRef) -> list:
        return [ds for ds in self.datasets.values()
                if ds.origin is not None and ds.origin.guid == snap.guid]

    def sync(self, txg: int, snapshots=()) -> bytes:
        for name in sorted(self.datasets):
            self.datasets[name].sync(txg)
        for item in snapshots:
            ds, name = item[0], item[1]
            guid = item[2] if len(item) > 2 else _derive_guid(self.pool, b"snap", ds.guid,
                                                              name, txg)
            ds.snapshots.append(SnapshotRef(name, txg, guid, ds.head.root, ds.name,
                                            ds.record_size))
        return self.encode()

    def walk(self, visit, read=None) -> None:
        for name in sorted(self.datasets):
            ds = self.datasets[name]
            ds.head.walk(visit, read)
            for snap in ds.snapshots:
                snap.view(self.pool).walk(visit, read)

    def encode(self) -> bytes:
        out = [CATALOG_MAGIC, struct.pack("<II", CATALOG_VERSION, len(self.datasets))]
        for name in sorted(self.datasets):
            ds = self.datasets[name]
            out.append(_pack_str(name))
            out.append(struct.pack("<16sI", ds.guid, ds.record_size))
            out.append(ds.head.root.encode())
            out.append(struct.pack("<B16s", ds.origin is not None,
                                   ds.origin.guid if ds.origin else bytes(16)))
            out.append(struct.pack("<I", len(ds.snapshots)))
            for snap in ds.snapshots:
                out.append(_pack_str(snap.name))
                out.append(struct.pack("<Q16s", snap.txg, snap.guid))
                out.append(snap.root.encode())
                out.append(struct.pack("<I", len(snap.deadlist)))
                out.extend(ref.encode() for ref in snap.deadlist)
        return b"".join(out)

    @classmethod
    def load(cls, pool: Pool, blob: bytes) -> "Catalog":
        cat = cls(pool)
        if blob[:8] != CATALOG_MAGIC:
            raise ValueError("bad catalog magic")
        version, count = struct.unpack_from("<II", blob, 8)
        if version != CATALOG_VERSION:
            raise ValueError(f"unsupported catalog version {version}")
        at = 16
        origins = {}
        for _ in range(count):
            name, at = _unpack_str(blob, at)
            guid, rs = struct.unpack_from("<16sI", blob, at)
            at += 20
            head_root = BlockRef.decode(blob, at)
            at += BREF_SIZE
            has_origin, origin_guid = struct.unpack_from("<B16s", blob, at)
            at += 17
            (nsnaps,) = struct.unpack_from("<I", blob, at)
            at += 4
            ds = Dataset(pool, name, guid, rs, ObjectSet(pool, head_root, rs))
            for _ in range(nsnaps):
                sname, at = _unpack_str(blob, at)
                txg, sguid = struct.unpack_from("<Q16s", blob, at)
                at += 24
                root = BlockRef.decode(blob, at)
                at += BREF_SIZE
                (ndead,) = struct.unpack_from("<I", blob, at)
                at += 4
                dead = [BlockRef.decode(blob, at + i * BREF_SIZE) for i in range(ndead)]
                at += ndead * BREF_SIZE
                ds.snapshots.append(SnapshotRef(sname, txg, sguid, root, name, rs, dead))
            if has_origin:
                origins[name] = origin_guid
            cat.datasets[name] = ds
        for name, oguid in origins.items():
            found = cat.snapshot_by_guid(oguid)
            if found is None:
                raise ValueError(f"clone {name} lost its origin snapshot")
            cat.datasets[name].origin = found[1]
        return cat


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_str(blob: bytes, at: int):
    (n,) = struct.unpack_from("<H", blob, at)
    return blob[at + 2:at + 2 + n].decode("utf-8"), at + 2 + n


def _derive_guid(pool: Pool, kind: bytes, *parts) -> bytes:
    h = hashlib.sha256(kind + pool.guid)
    for p in parts:
        h.update(p if isinstance(p, bytes) else str(p).encode())
        h.update(b"\0")
    return h.digest()[:16]


def _check_name(name: str) -> None:
    if not name or "@" in name or name.startswith("/") or name.endswith("/") or "//" in name:
        raise ValueError(f"invalid dataset name {name!r}")


# ------------------------------------------------------------------ operations


def get_dataset(pool: Pool, name: str) -> Dataset:
    try:
        return pool.catalog.datasets[name]
    except KeyError:
        raise KeyError(f"no dataset {name!r}") from None


def get_snapshot(pool: Pool, full_name: str) -> SnapshotRef:
    ds_name, _, snap = full_name.partition("@")
    return get_dataset(pool, ds_name).snapshot_named(snap)


def create_dataset(pool: Pool, name: str, record_size: int = DEFAULT_RECORD_SIZE,
                   commit: bool = True) -> Dataset:
    _check_name(name)
    if name in pool.catalog.datasets:
        raise NameInUse(f"dataset {name!r} exists")
    if record_size < pool.sector_size or record_size > RECORD_SIZE_MAX or (
            record_size & (record_size - 1)):
        raise ValueError(f"record size {record_size} must be a power of two in "
                         f"[{pool.sector_size}, {RECORD_SIZE_MAX}]")
    guid = _derive_guid(pool, b"dataset", name, pool.open_txg)
    ds = Dataset(pool, name, guid, record_size, ObjectSet(pool, hole(0), record_size))
    pool.catalog.datasets[name] = ds
    if commit:
        pool.commit_txg()
    return ds


def _objset(target) -> ObjectSet:
    if isinstance(target, Dataset):
        return target.head
    if isinstance(target, SnapshotRef):
        raise ReadOnlyError(f"{target.full_name} is a read-only snapshot")
    raise TypeError(f"not a dataset: {target!r}")


def _reader(target, pool: Pool | None = None) -> ObjectSet:
    if isinstance(target, Dataset):
        return target.head
    if isinstance(target, SnapshotRef):
        if pool is None:
            raise TypeError("reading a snapshot needs its pool")
        return target.view(pool)
    if isinstance(target, ObjectSet):
        return target
    raise TypeError(f"not a dataset or snapshot: {target!r}")


def write_file(target, object_id: int, offset: int, data) -> None:
    _objset(target).write(object_id, offset, data)


def truncate_file(target, object_id: int, size: int) -> None:
    _objset(target).truncate(object_id, size)


def read_file(target, object_id: int, offset: int, length: int, pool: Pool | None = None) -> bytes:
    return _reader(target, pool).read(object_id, offset, length)


def snapshot(ds: Dataset, snap_name: str) -> SnapshotRef:
    if not snap_name or "@" in snap_name or "/" in snap_name:
        raise ValueError(f"invalid snapshot name {snap_name!r}")
    if any(s.name == snap_name for s in ds.snapshots):
        raise NameInUse(f"snapshot {ds.name}@{snap_name} exists")
    ds.pool.commit_txg(snapshots=[(ds, snap_name)])
    return ds.pool.catalog.datasets[ds.name].snapshots[-1]


def clone(pool: Pool, snap: SnapshotRef, new_name: str) -> Dataset:
    _check_name(new_name)
    if new_name in pool.catalog.datasets:
        raise NameInUse(f"dataset {new_name!r} exists")
    guid = _derive_guid(pool, b"dataset", new_name, pool.open_txg)
    ds = Dataset(pool, new_name, guid, snap.record_size,
                 ObjectSet(pool, snap.root, snap.record_size), origin=snap)
    pool.catalog.datasets[new_name] = ds
    pool.commit_txg()
    return pool.catalog.datasets[new_name]


def _destroy_snapshot(ds: Dataset, snap_name: str) -> int:
    pool = ds.pool
    snap = ds.snapshot_named(snap_name)
    if pool.catalog.clones_of(snap):
        raise HasDependents(f"{snap.full_name} has dependent clones")
    i = ds.snapshots.index(snap)
    prev = ds.snapshots[i - 1] if i > 0 else ds.origin
    freed = 0
    for ref in snap.deadlist:
        if prev is not None and ref.birth_txg <= prev.txg:
            if prev.dataset == ds.name:
                prev.deadlist.append(ref)
            continue
        pool.free_block(ref, -1)
        freed += pool.rows_of(ref) * pool.width
    del ds.snapshots[i]
    return freed


def destroy_snapshot(ds: Dataset, snap_name: str) -> int:
    """Destroy a snapshot; returns the number of sectors freed."""
    freed = _destroy_snapshot(ds, snap_name)
    ds.pool.commit_txg()
    return freed


def _owned_blocks(ds: Dataset) -> list:
    floor = ds.origin.txg if ds.origin is not None else 0
    seen = {}

    def visit(ref):
        if ref.birth_txg <= floor or ref.vdev_start_row in seen:
            return False
        seen[ref.vdev_start_row] = ref
        return True

    ds.head.walk(visit)
    for snap in ds.snapshots:
        snap.view(ds.pool).walk(visit)
    return list(seen.values())


def destroy_dataset(pool: Pool, name: str, commit: bool = True) -> None:
    ds = get_dataset(pool, name)
    for snap in ds.snapshots:
        if pool.catalog.clones_of(snap):
            raise HasDependents(f"{snap.full_name} has dependent clones")
    for ref in _owned_blocks(ds):
        pool.free_block(ref, -1)
    del pool.catalog.datasets[name]
    if commit:
        pool.commit_txg()


def rollback(ds: Dataset, snap: SnapshotRef, commit: bool = True) -> None:
    """Return the head to ``snap``, destroying every newer snapshot."""
    pool = ds.pool
    if snap not in ds.snapshots:
        raise DatasetError(f"{snap.full_name} is not a snapshot of {ds.name}")
    newer = ds.snapshots[ds.snapshots.index(snap) + 1:]
    for s in newer:
        if pool.catalog.clones_of(s):
            raise HasDependents(f"{s.full_name} has dependent clones")
    while ds.snapshots[-1] is not snap:
        _destroy_snapshot(ds, ds.snapshots[-1].name)
    ds.head = ObjectSet(ds.head.pool, ds.head.root, ds.record_size)
    seen = set()

    def visit(ref):
        if ref.birth_txg <= snap.txg or ref.vdev_start_row in seen:
            return False
        seen.add(ref.vdev_start_row)
        pool.free_block(ref, snap.txg)
        return True

    ds.head.walk(visit)
    ds.head = ObjectSet(pool, snap.root, ds.record_size)
    snap.deadlist.clear()
    if commit:
        pool.commit_txg()


def space_report(ds: Dataset) -> dict:
    pool = ds.pool
    referenced = 0
    seen = set()

    def ref_visit(ref):
        nonlocal referenced
        if ref.vdev_start_row in seen:
            return False
        seen.add(ref.vdev_start_row)
        referenced += pool.asize(ref)
        return True

    ds.head.walk(ref_visit)
    used = sum(pool.asize(ref) for ref in _owned_blocks(ds))
    return {"used_bytes": used, "available_bytes": pool.free_bytes(),
            "referenced_bytes": referenced}


def metadata_bytes(pool: Pool) -> int:
    """Bytes held by the pool catalog itself (not charged to any dataset)."""
    return sum(pool.asize(ref) for ref in pool._catalog_blocks())


def content_hash(target, pool: Pool | None = None) -> str:
    """Digest of an object set's logical content (ids, sizes, record bytes)."""
    objs = _reader(target, pool)
    h = hashlib.sha256(struct.pack("<I", objs.record_size))
    for oid in objs.object_ids():
        st = objs.object(oid)
        h.update(struct.pack("<QQ", oid, st.size))
        for idx in st.tree.data_indices():
            h.update(struct.pack("<Q", idx))
            h.update(hashlib.sha256(st.tree.read_leaf(idx)).digest())
    return h.hexdigest()


def pool_content_hash(pool: Pool) -> str:
    """Digest over every dataset head and snapshot of a pool."""
    h = hashlib.sha256()
    for name in sorted(pool.catalog.datasets):
        ds = pool.catalog.datasets[name]
        h.update(name.encode() + b"\0" + ds.guid)
        h.update(content_hash(ds).encode())
        for snap in ds.snapshots:
            h.update(snap.name.encode() + b"\0" + snap.guid + struct.pack("<Q", snap.txg))
            h.update(content_hash(snap, pool).encode())
    return h.hexdigest()
