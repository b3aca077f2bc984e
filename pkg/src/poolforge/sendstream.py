"""Serialized snapshot streams: full and incremental send, receive, diff.

Layout (little-endian)::

    header  "PFSEND01" u16 version u16 flags u32 record_size
            16s to_guid 16s from_guid u16 len + UTF-8 "dataset@snapshot"
    OBJECT    u8 1  u64 id u64 size
    WRITE     u8 2  u64 id u64 offset u32 logical_len u8 comp 32s checksum
                    u32 payload_len + payload (physical, sector padded)
    FREE      u8 3  u64 id u64 offset u64 length (2**64-1: to the end)
    WRITE_REF u8 5  as WRITE, payload omitted (receiver already holds it)
    END       u8 4  32s sha256 of every byte before this record

Incremental streams carry only blocks born after the base snapshot's txg.
"""

import hashlib
import struct
from dataclasses import dataclass

from . import codec
from .blockref import MAX_U64, TYPE_DATA, hole
from .dataset import (Dataset, NameInUse, ObjectSet, SnapshotRef, create_dataset,
                      destroy_dataset, rollback)
from .pool import Pool

MAGIC = b"PFSEND01"
VERSION = 1
FLAG_INCREMENTAL = 0x1

REC_OBJECT = 1
REC_WRITE = 2
REC_FREE = 3
REC_END = 4
REC_WRITE_REF = 5

_HDR = struct.Struct("<8sHHI16s16s")
_OBJECT = struct.Struct("<BQQ")
_WRITE = struct.Struct("<BQQIB32sI")
_FREE = struct.Struct("<BQQQ")
_END = struct.Struct("<B32s")
TO_END = MAX_U64


class SendError(Exception):
    pass


class StreamCorrupt(SendError):
    pass


class NoBase(SendError):
    pass


class LineageError(SendError):
    pass


class ReceiveConflict(SendError):
    pass


@dataclass
class StreamHeader:
    flags: int
    record_size: int
    to_guid: bytes
    from_guid: bytes
    dataset_name: str
    version: int = VERSION

    @property
    def incremental(self) -> bool:
        return bool(self.flags & FLAG_INCREMENTAL)

    def encode(self) -> bytes:
        name = self.dataset_name.encode("utf-8")
        return (_HDR.pack(MAGIC, self.version, self.flags, self.record_size, self.to_guid,
                          self.from_guid) + struct.pack("<H", len(name)) + name)


@dataclass
class WriteRecord:
    object_id: int
    offset: int
    logical_len: int
    compression: int
    checksum: bytes
    payload: bytes | None  # None for a by-reference stub
    payload_len: int


class _Writer:
    def __init__(self, header: StreamHeader):
        self.parts = [header.encode()]

    def object(self, oid: int, size: int) -> None:
        self.parts.append(_OBJECT.pack(REC_OBJECT, oid, size))

    def write(self, oid, offset, logical_len, comp, checksum, payload) -> None:
        self.parts.append(_WRITE.pack(REC_WRITE, oid, offset, logical_len, comp, checksum,
                                      len(payload)))
        self.parts.append(payload)

    def write_ref(self, oid, offset, logical_len, comp, checksum, payload_len) -> None:
        self.parts.append(_WRITE.pack(REC_WRITE_REF, oid, offset, logical_len, comp, checksum,
                                      payload_len))

    def free(self, oid: int, offset: int, length: int) -> None:
        self.parts.append(_FREE.pack(REC_FREE, oid, offset, length))

    def finish(self) -> bytes:
        body = b"".join(self.parts)
        return body + _END.pack(REC_END, hashlib.sha256(body).digest())


# ------------------------------------------------------------------ parsing


def parse_stream(stream: bytes):
    """Verify the END digest, then return ``(header, records)``.

    Records are tuples ``("object", id, size)``, ``("write", WriteRecord)``
    and ``("free", id, offset, length)``. Any defect raises StreamCorrupt.
    """
    stream = bytes(stream)
    if len(stream) < _HDR.size + 2 + _END.size:
        raise StreamCorrupt("stream truncated")
    tail = stream[-_END.size:]
    if tail[0] != REC_END:
        raise StreamCorrupt("stream does not end with an END record")
    body = stream[:-_END.size]
    if hashlib.sha256(body).digest() != tail[1:]:
        raise StreamCorrupt("stream digest mismatch")
    try:
        return _parse_body(body)
    except (struct.error, UnicodeDecodeError, IndexError) as exc:
        raise StreamCorrupt(f"malformed stream: {exc}") from exc


def _parse_body(body: bytes):
    magic, version, flags, rs, to_guid, from_guid = _HDR.unpack_from(body, 0)
    if magic != MAGIC:
        raise StreamCorrupt("bad stream magic")
    if version != VERSION:
        raise StreamCorrupt(f"unsupported stream version {version}")
    if bool(flags & FLAG_INCREMENTAL) != (from_guid != bytes(16)) or flags & ~FLAG_INCREMENTAL:
        raise StreamCorrupt("stream flags disagree with from_guid")
    at = _HDR.size
    (n,) = struct.unpack_from("<H", body, at)
    if at + 2 + n > len(body):
        raise StreamCorrupt("truncated dataset name")
    name = body[at + 2:at + 2 + n].decode("utf-8")
    at += 2 + n
    header = StreamHeader(flags, rs, to_guid, from_guid, name, version)
    records = []
    while at < len(body):
        kind = body[at]
        if kind == REC_OBJECT:
            _, oid, size = _OBJECT.unpack_from(body, at)
            records.append(("object", oid, size))
            at += _OBJECT.size
        elif kind in (REC_WRITE, REC_WRITE_REF):
            _, oid, off, llen, comp, cksum, plen = _WRITE.unpack_from(body, at)
            at += _WRITE.size
            payload = None
            if kind == REC_WRITE:
                if at + plen > len(body):
                    raise StreamCorrupt("truncated WRITE payload")
                payload = body[at:at + plen]
                at += plen
            records.append(("write", WriteRecord(oid, off, llen, comp, cksum, payload, plen)))
        elif kind == REC_FREE:
            _, oid, off, length = _FREE.unpack_from(body, at)
            records.append(("free", oid, off, length))
            at += _FREE.size
        elif kind == REC_END:
            raise StreamCorrupt("END record before end of stream")
        else:
            raise StreamCorrupt(f"unknown record kind {kind}")
    return header, records


def read_header(stream: bytes) -> StreamHeader:
    return parse_stream(stream)[0]


# ------------------------------------------------------------------ sending


def _check_lineage(pool: Pool, base: SnapshotRef, target: SnapshotRef) -> None:
    if base.txg >= target.txg:
        raise LineageError(f"{base.full_name} is not older than {target.full_name}")
    ds = pool.catalog.datasets.get(target.dataset)
    if ds is None or not any(s.guid == base.guid for s in ds.lineage()):
        raise LineageError(f"{base.full_name} is not an ancestor of {target.full_name}")


def _changed_objects(pool: Pool, base: SnapshotRef | None, target: SnapshotRef):
    """``(oid, size, tree, since, old)`` for objects that differ from ``base``.

    ``since`` is the birth cutoff for the object's own tree (0 for objects new
    since ``base``); ``old`` is the base state or None.
    """
    view = target.view(pool)
    since = base.txg if base is not None else 0
    base_view = base.view(pool) if base is not None else None
    for kind, leaf_idx, ref in view.meta.changes(since):
        if kind != "write":
            continue  # objects are never removed, so meta leaves never vanish
        leaf = pool.read_logical_block(ref)
        for oid, size, root in view.dnodes_in_leaf(leaf, leaf_idx):
            old = base_view._load(oid) if base_view is not None else None
            if old is not None and old.size == size and old.tree.root == root:
                continue
            tree = view.object(oid).tree
            yield oid, size, tree, since if old is not None else 0, old


def _emit(pool: Pool, base, target, writer: _Writer) -> None:
    rs = target.record_size
    for oid, size, tree, since, _ in _changed_objects(pool, base, target):
        writer.object(oid, size)
        for kind, lo, extra in tree.changes(since):
            if kind == "write":
                ref = extra
                physical = pool.read_physical(ref)
                writer.write(oid, lo * rs, ref.logical_size, ref.compression, ref.checksum,
                             physical)
            elif since:  # frees mean nothing against an empty base
                length = TO_END if extra is None else (extra - lo) * rs
                writer.free(oid, lo * rs, length)


def send_full(pool: Pool, snap: SnapshotRef) -> bytes:
    header = StreamHeader(0, snap.record_size, snap.guid, bytes(16), snap.full_name)
    writer = _Writer(header)
    _emit(pool, None, snap, writer)
    return writer.finish()


def send_incremental(pool: Pool, base: SnapshotRef, target: SnapshotRef) -> bytes:
    _check_lineage(pool, base, target)
    if base.record_size != target.record_size:
        raise LineageError("record size differs between snapshots")
    header = StreamHeader(FLAG_INCREMENTAL, target.record_size, target.guid, base.guid,
                          target.full_name)
    writer = _Writer(header)
    _emit(pool, base, target, writer)
    return writer.finish()


def send_discrete(pool: Pool, ds: Dataset) -> bytes:
    """Incremental from the previous snapshot to the newest."""
    if len(ds.snapshots) < 2:
        return send_full(pool, ds.snapshots[-1])
    return send_incremental(pool, ds.snapshots[-2], ds.snapshots[-1])


def send_cumulative(pool: Pool, origin: SnapshotRef, ds: Dataset) -> bytes:
    """Incremental from a fixed origin snapshot to the newest."""
    newest = ds.snapshots[-1]
    if newest.guid == origin.guid:
        return send_full(pool, newest)
    return send_incremental(pool, origin, newest)


# ------------------------------------------------------------------ dedup


def held_checksums(pool: Pool) -> set:
    """Physical checksums of every data leaf the pool holds."""
    held = set()

    def visit(ref):
        if ref.level == 0 and ref.block_type == TYPE_DATA:
            held.add(ref.checksum)
        return True

    pool.walk_live(visit)
    return held


def dedup_stream(stream: bytes, held) -> bytes:
    """Replace WRITE payloads the receiver already holds with by-reference stubs."""
    header, records = parse_stream(stream)
    writer = _Writer(header)
    for rec in records:
        if rec[0] == "object":
            writer.object(rec[1], rec[2])
        elif rec[0] == "free":
            writer.free(rec[1], rec[2], rec[3])
        else:
            w = rec[1]
            if w.payload is None or w.checksum in held:
                writer.write_ref(w.object_id, w.offset, w.logical_len, w.compression,
                                 w.checksum, w.payload_len)
            else:
                writer.write(w.object_id, w.offset, w.logical_len, w.compression,
                             w.checksum, w.payload)
    return writer.finish()


def stream_payload_bytes(stream: bytes) -> int:
    return sum(r[1].payload_len for r in parse_stream(stream)[1]
               if r[0] == "write" and r[1].payload is not None)


def pool_block_resolver(pool: Pool):
    """Map a physical checksum to bytes already stored in ``pool``."""
    index = {}

    def visit(ref):
        if ref.level == 0 and ref.block_type == TYPE_DATA:
            index.setdefault(ref.checksum, ref)
        return True

    pool.walk_live(visit)

    def resolve(checksum: bytes):
        ref = index.get(checksum)
        return pool.read_physical(ref) if ref is not None else None

    return resolve


# ------------------------------------------------------------------ receiving


def _apply(objs: ObjectSet, records, resolve, pool: Pool) -> None:
    rs = objs.record_size
    for rec in records:
        if rec[0] == "object":
            objs.apply_object(rec[1], rec[2])
        elif rec[0] == "free":
            _, oid, off, length = rec
            if off % rs or (length != TO_END and length % rs):
                raise StreamCorrupt("FREE range not record aligned")
            hi = None if length == TO_END else (off + length) // rs
            objs.free_records(oid, off // rs, hi)
        else:
            w = rec[1]
            if w.offset % rs or w.logical_len != rs:
                raise StreamCorrupt("WRITE not a whole record")
            payload = w.payload
            if payload is None:
                payload = resolve(w.checksum) if resolve is not None else None
                if payload is None:
                    raise StreamCorrupt("by-reference block not held by receiver")
            if len(payload) != w.payload_len or len(payload) % pool.sector_size:
                raise StreamCorrupt("WRITE payload length mismatch")
            if codec.checksum256(payload) != w.checksum:
                raise StreamCorrupt("WRITE payload checksum mismatch")
            try:
                logical = codec.decode_physical(w.compression, payload, w.logical_len)
            except (codec.CorruptStream, ValueError) as exc:
                raise StreamCorrupt(f"WRITE payload undecodable: {exc}") from exc
            objs.set_record(w.object_id, w.offset // rs, logical)


def receive(pool: Pool, stream: bytes, target_name: str | None = None, force: bool = False,
            resolve=None) -> SnapshotRef:
    """Apply a stream atomically; returns the new snapshot (guid = stream's to_guid).

    Nothing becomes visible unless the whole stream verifies and applies.
    ``force`` lets a full stream replace an existing dataset and lets an
    incremental stream roll the receiver back to its base first.
    """
    header, records = parse_stream(stream)
    ds_name, _, snap_name = header.dataset_name.partition("@")
    if not snap_name:
        raise StreamCorrupt("stream names no snapshot")
    ds_name = target_name or ds_name
    cat = pool.catalog
    if cat.snapshot_by_guid(header.to_guid) is not None:
        raise ReceiveConflict(f"snapshot {header.to_guid.hex()} already received")
    if resolve is None and any(r[0] == "write" and r[1].payload is None for r in records):
        resolve = pool_block_resolver(pool)

    if header.incremental:
        found = cat.snapshot_by_guid(header.from_guid)
        if found is None:
            raise NoBase(f"base snapshot {header.from_guid.hex()} not present")
        ds, base = found
        if ds.record_size != header.record_size:
            raise StreamCorrupt("record size differs from receiving dataset")
        current = ds.snapshots[-1] is base and ds.unmodified_since(base)
        if not current and not force:
            raise ReceiveConflict(f"{ds.name} changed since {base.full_name}; use force")
        objs = ObjectSet(pool, base.root, ds.record_size)
        _apply(objs, records, resolve, pool)
        if not current:
            rollback(ds, base, commit=False)
        ds.head = objs
    else:
        existing = cat.datasets.get(ds_name)
        if existing is not None and not force:
            raise NameInUse(f"dataset {ds_name!r} exists; use force")
        objs = ObjectSet(pool, hole(0), header.record_size)
        _apply(objs, records, resolve, pool)
        if existing is not None:
            destroy_dataset(pool, ds_name, commit=False)
        ds = create_dataset(pool, ds_name, header.record_size, commit=False)
        ds.head = objs
    pool.commit_txg(snapshots=[(ds, snap_name, header.to_guid)])
    return pool.catalog.datasets[ds.name].snapshots[-1]


# ------------------------------------------------------------------ diff


def diff(pool: Pool, a: SnapshotRef, b: SnapshotRef) -> list:
    """Coalesced ``(object_id, start, end, kind)`` ranges changed from ``a`` to ``b``.

    ``kind`` is "write" or "free"; a size-only change appears as
    ``(id, old_size, new_size, "resize")``.
    """
    if a.guid == b.guid:
        return []
    _check_lineage(pool, a, b)
    rs = b.record_size
    out = []
    for oid, size, tree, since, old in _changed_objects(pool, a, b):
        old_size = old.size if old is not None else 0
        old_extent = -(-old_size // rs) * rs
        ranges = []
        for kind, lo, extra in tree.changes(since):
            start = lo * rs
            if kind == "write":
                end = start + rs
            else:
                end = old_extent if extra is None else min(extra * rs, old_extent)
                if end <= start or not since:
                    continue
            if ranges and ranges[-1][3] == kind and ranges[-1][2] == start:
                ranges[-1] = (oid, ranges[-1][1], end, kind)
            else:
                ranges.append((oid, start, end, kind))
        if not ranges and size != old_size:
            ranges.append((oid, old_size, size, "resize"))
        out.extend(ranges)
    return out
