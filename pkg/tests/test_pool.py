import os
import random

import pytest

from conftest import make_devices, make_pool
from harness import (device_paths, open_images, pool_signature, record_writes, replay_cuts,
                     snapshot_images)
from poolforge import dataset as D
from poolforge.blockref import TYPE_DATA
from poolforge.codec import COMPRESS_RAW, COMPRESS_ZLE
from poolforge.pool import (DEFERRED, FREED_NOW, ChecksumError, CommitAborted, PoolCorrupt,
                            PoolError, create_pool, import_pool)
from poolforge.spacemap import DoubleFree, OutOfSpace
from poolforge.vdev import (LABEL_SECTORS, FaultKind, FaultSpec, create_device, open_device,
                            read_label_copies, slot_location)


def reopen(pool):
    paths = device_paths(pool)
    pool.close()
    return open_images(paths)


def test_create_geometry(tmp_path):
    pool = make_pool(str(tmp_path), n=4, sectors=4096)
    assert pool.width == 4 and pool.txg == 1
    assert pool.data_capacity_bytes == 4 * (4096 - 2 * LABEL_SECTORS) * 512
    assert pool.free_bytes() == pool.data_capacity_bytes - D.metadata_bytes(pool)
    pool.check_space()


def test_create_errors(tmp_path):
    with pytest.raises(PoolError):
        create_pool(make_devices(str(tmp_path), 1), "one")
    mixed = make_devices(str(tmp_path), 2, prefix="m") + [
        create_device(tmp_path / "big", 8192 * 2)]
    with pytest.raises(PoolError):
        create_pool(mixed, "mixed")
    devs = make_devices(str(tmp_path), 3, prefix="r")
    create_pool(devs, "first")
    with pytest.raises(PoolError, match="already labeled"):
        create_pool(devs, "second")
    assert create_pool(devs, "second", force=True).name == "second"


def test_block_round_trip_and_compression(pool):
    data = os.urandom(3000)
    ref = pool.write_logical_block(data)
    assert ref.compression == COMPRESS_RAW and ref.birth_txg == pool.open_txg
    assert ref.physical_sectors == 6 and pool.read_logical_block(ref) == data
    ref0 = pool.write_logical_block(bytes(512))
    assert ref0.compression == COMPRESS_RAW  # four bytes of tokens still fill a sector
    big0 = pool.write_logical_block(bytes(4096))
    assert big0.compression == COMPRESS_ZLE and big0.physical_sectors == 1
    assert pool.read_logical_block(big0) == bytes(4096)
    with pytest.raises(ValueError):
        pool.write_logical_block(b"")


def test_alloc_first_fit(pool):
    a = pool.alloc(8)
    assert a == pool.freemap.extents[0][0] - 2
    pool.freemap.free(a, 2)
    assert pool.alloc(8) == a
    with pytest.raises(OutOfSpace):
        pool.alloc(pool.data_capacity_bytes)


def test_free_disposition(pool):
    ref = pool.write_logical_block(os.urandom(600))
    assert pool.free_block(ref, 0) == FREED_NOW
    with pytest.raises(DoubleFree):
        pool.free_block(ref, 0)
    other = pool.write_logical_block(os.urandom(600))
    assert pool.free_block(other.with_birth(5), 7) == DEFERRED
    assert pool.free_block(other.with_birth(8), 7) == FREED_NOW


def test_commit_advances_slots(pool):
    t1 = pool.commit_txg()
    t2 = pool.commit_txg()  # nothing dirty: still a heartbeat
    assert t2 == t1 + 1
    dev = pool.devices[0]
    labels = read_label_copies(dev)
    assert {t1, t2} <= set(labels[0].valid_slots()) and {t1, t2} <= set(labels[1].valid_slots())
    assert slot_location(dev, t1, 0) != slot_location(dev, t2, 0)


def test_export_import_round_trip(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, os.urandom(200_000))
    pool.commit_txg()
    sig, h = pool_signature(pool), D.pool_content_hash(pool)
    again = reopen(pool)
    assert pool_signature(again) == sig and D.pool_content_hash(again) == h
    again.check_space()


def test_import_skips_corrupt_newest_slot(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, b"old")
    pool.commit_txg()
    prev = pool_signature(pool)
    D.write_file(ds, 1, 0, b"new")
    txg = pool.commit_txg()
    dev = pool.devices[2]
    sector, _ = slot_location(dev, txg, 0)
    raw = bytearray(dev.read_sectors(sector, 1))
    raw[40] ^= 0xFF
    dev.write_sectors(sector, bytes(raw))
    again = reopen(pool)
    assert pool_signature(again) == prev
    assert D.read_file(D.get_dataset(again, "tank/fs"), 1, 0, 3) == b"old"


def test_import_missing_children(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs")
    payload = os.urandom(50_000)
    D.write_file(ds, 1, 0, payload)
    pool.commit_txg()
    paths = device_paths(pool)
    pool.close()
    degraded = import_pool([open_device(p) for p in paths[1:]])
    assert degraded.degraded and degraded.status()["state"] == "degraded"
    assert D.read_file(D.get_dataset(degraded, "tank/fs"), 1, 0, 50_000) == payload
    degraded.close()
    with pytest.raises(PoolError, match="2 of 4"):
        import_pool([open_device(p) for p in paths[2:]])


def test_offline_child_does_not_veto_later_commits(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, b"before")
    pool.commit_txg()
    pool.devices[0].inject_fault(FaultSpec(FaultKind.OFFLINE))
    D.write_file(ds, 2, 0, b"while degraded")
    pool.commit_txg()
    D.write_file(ds, 3, 0, b"and again")
    pool.commit_txg()
    sig = pool_signature(pool)
    pool.devices[0].clear_faults()
    again = reopen(pool)
    assert pool_signature(again) == sig
    fs = D.get_dataset(again, "tank/fs")
    assert D.read_file(fs, 2, 0, 100) == b"while degraded"
    report = again.scrub()
    assert report.permanent_errors == 0 and report.repaired > 0
    assert again.scrub().checksum_errors_found == 0


def test_commit_abort_keeps_previous_txg(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, b"kept")
    pool.commit_txg()
    sig = pool_signature(pool)
    D.write_file(ds, 2, 0, b"lost")
    for dev in pool.devices[:2]:
        dev.inject_fault(FaultSpec(FaultKind.OFFLINE))
    with pytest.raises(CommitAborted):
        pool.commit_txg()
    assert pool_signature(pool) == sig
    for dev in pool.devices:
        dev.clear_faults()
    pool.check_space()
    assert pool_signature(reopen(pool)) == sig


def test_out_of_space_aborts_cleanly(tmp_path):
    pool = make_pool(str(tmp_path), n=3, sectors=1024)
    ds = D.create_dataset(pool, "tank/fs", record_size=4096)
    D.write_file(ds, 1, 0, os.urandom(2_000_000))
    with pytest.raises(CommitAborted):
        pool.commit_txg()
    pool.check_space()


def test_scrub_repairs_single_child(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs", record_size=4096)
    D.write_file(ds, 1, 0, os.urandom(40_000))
    pool.commit_txg()
    clean = pool.scrub()
    live = []
    pool.walk_live(lambda r: live.append(r) or True)
    assert clean.checksum_errors_found == 0 and clean.blocks_examined == len(live)
    data_ref = next(r for r in live if r.block_type == TYPE_DATA)
    dev = pool.devices[1]
    dev.inject_fault(FaultSpec(FaultKind.SILENT_CORRUPTION, LABEL_SECTORS + data_ref.vdev_start_row,
                               1, 3))
    dev.clear_faults()
    rep = pool.scrub()
    assert (rep.checksum_errors_found, rep.repaired, rep.permanent_errors) == (1, 1, 0)
    assert pool.scrub().checksum_errors_found == 0


def test_two_children_in_row_is_permanent(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs", record_size=4096)
    D.write_file(ds, 1, 0, os.urandom(4096))
    pool.commit_txg()
    live = []
    pool.walk_live(lambda r: live.append(r) or True)
    ref = next(r for r in live if r.block_type == TYPE_DATA)
    for col in (1, 2):
        dev = pool.devices[col]
        dev.inject_fault(FaultSpec(FaultKind.SILENT_CORRUPTION,
                                   LABEL_SECTORS + ref.vdev_start_row, 1, col))
        dev.clear_faults()
    pool.cache.clear()
    with pytest.raises(ChecksumError):
        pool.read_logical_block(ref)
    rep = pool.scrub()
    assert (rep.checksum_errors_found, rep.permanent_errors) == (1, 1)


def test_no_valid_uberblock(tmp_path):
    pool = make_pool(str(tmp_path), n=2, sectors=1024)
    paths = device_paths(pool)
    pool.close()
    for p in paths:
        dev = open_device(p)
        for copy in (0, 1):
            for txg in range(128):
                sector, _ = slot_location(dev, txg, copy)
                dev.write_sectors(sector, bytes(512))
        dev.close()
    with pytest.raises(PoolCorrupt):
        open_images(paths)


def test_prefix_cuts_of_one_commit(tmp_path):
    pool = make_pool(str(tmp_path), n=3, sectors=2048)
    ds = D.create_dataset(pool, "tank/fs", record_size=4096)
    D.write_file(ds, 1, 0, random.Random(0).randbytes(20_000))
    pre = pool_signature(pool)
    images = snapshot_images(device_paths(pool), str(tmp_path / "pre"))
    writes, _ = record_writes(pool, pool.commit_txg)
    post = pool_signature(pool)
    seen = []

    def check(p, final):
        seen.append(final)
        assert pool_signature(p) == (post if final else pre)

    replay_cuts(images, writes, check)
    assert seen.count(True) == 1 and len(seen) > len(writes)


def test_cache_lru():
    from poolforge.pool import BlockCache
    c = BlockCache(10)
    c.put("a", b"12345")
    c.put("b", b"12345")
    c.get("a")
    c.put("c", b"12345")
    assert c.get("b") is None and c.get("a") == b"12345"
