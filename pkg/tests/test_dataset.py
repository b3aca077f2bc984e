import os
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_pool
from harness import device_paths, open_images
from poolforge import dataset as D
from poolforge.blockref import TYPE_CATALOG, TYPE_DATA
from poolforge.dataset import HasDependents, NameInUse, NoSuchObject, ReadOnlyError
from shadow import run_history


def live_blocks(pool, catalog=False):
    out = {}

    def visit(ref):
        if catalog or ref.block_type != TYPE_CATALOG:
            out[ref.vdev_start_row] = ref
        return True

    pool.walk_live(visit)
    return out


def data_blocks(pool, target):
    objs = D._reader(target, pool)
    out = set()

    def visit(ref):
        if ref.block_type == TYPE_DATA and ref.level == 0:
            out.add(ref.vdev_start_row)
        return True

    objs.walk(visit)
    return out


def test_write_read_round_trip(pool):
    ds = D.create_dataset(pool, "tank/fs")
    data = os.urandom(1 << 20)
    D.write_file(ds, 1, 0, data)
    assert D.read_file(ds, 1, 0, len(data)) == data
    pool.commit_txg()
    pool.cache.clear()
    assert D.read_file(ds, 1, 0, len(data)) == data
    assert D.read_file(ds, 1, len(data) - 10, 100) == data[-10:]  # clamped at size
    assert D.read_file(ds, 1, len(data) + 5, 10) == b""
    with pytest.raises(NoSuchObject):
        D.read_file(ds, 9, 0, 1)


def test_snapshot_immutable(pool):
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, b"original")
    snap = D.snapshot(ds, "one")
    D.write_file(ds, 1, 0, b"replaced")
    pool.commit_txg()
    assert D.read_file(snap, 1, 0, 8, pool) == b"original"
    assert D.read_file(ds, 1, 0, 8) == b"replaced"
    with pytest.raises(ReadOnlyError):
        D.write_file(snap, 1, 0, b"no")
    with pytest.raises(NameInUse):
        D.snapshot(ds, "one")


def test_sparse_write_far_out(pool):
    ds = D.create_dataset(pool, "tank/fs")
    free0 = pool.free_bytes()
    meta0 = D.metadata_bytes(pool)
    D.write_file(ds, 1, 1 << 30, b"tail")
    pool.commit_txg()
    assert D.read_file(ds, 1, (1 << 30) - 4, 8) == bytes(4) + b"tail"
    assert D.read_file(ds, 1, 12345, 64) == bytes(64)
    report = D.space_report(ds)
    # independent count: rows the free map lost, less catalog growth
    assert free0 - pool.free_bytes() - (D.metadata_bytes(pool) - meta0) == report["used_bytes"]
    blocks = [r for r in live_blocks(pool).values()]
    # one data leaf, two indirect levels for leaf 8192, one meta leaf
    assert sorted((r.block_type, r.level) for r in blocks) == [(1, 0), (2, 1), (2, 2), (3, 0)]


def test_snapshot_sharing_and_divergence(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs", record_size=4096)
    D.write_file(ds, 1, 0, os.urandom(40 * 4096))
    a = D.snapshot(ds, "a")
    b = D.snapshot(ds, "b")
    assert a.root == b.root
    empty = D.create_dataset(pool, "tank/empty")
    e = D.snapshot(empty, "e")
    assert D.content_hash(e, pool) == D.content_hash(empty)
    for i in range(10):
        D.write_file(ds, 1, i * 3 * 4096, os.urandom(4096))
    pool.commit_txg()
    before, after = data_blocks(pool, b), data_blocks(pool, ds)
    assert len(before - after) == 10 and len(after - before) == 10
    assert len(before & after) == 30


def test_clone_isolation(pool):
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, b"base")
    snap = D.snapshot(ds, "s")
    c = D.clone(pool, snap, "tank/clone")
    assert D.content_hash(c) == D.content_hash(snap, pool)
    D.write_file(c, 1, 0, b"CLON")
    D.write_file(c, 2, 0, b"new")
    pool.commit_txg()
    assert D.read_file(snap, 1, 0, 4, pool) == b"base"
    assert D.read_file(D.get_dataset(pool, "tank/fs"), 1, 0, 4) == b"base"
    with pytest.raises(HasDependents):
        D.destroy_snapshot(D.get_dataset(pool, "tank/fs"), "s")
    with pytest.raises(HasDependents):
        D.destroy_dataset(pool, "tank/fs")
    with pytest.raises(NameInUse):
        D.clone(pool, snap, "tank/clone")
    D.destroy_dataset(pool, "tank/clone")
    D.destroy_snapshot(D.get_dataset(pool, "tank/fs"), "s")
    pool.check_space()


def test_destroy_only_snapshot_frees_deadlist(pool):
    ds = D.create_dataset(pool, "tank/fs", record_size=4096)
    D.write_file(ds, 1, 0, os.urandom(8 * 4096))
    D.snapshot(ds, "s")
    D.write_file(ds, 1, 0, os.urandom(8 * 4096))
    pool.commit_txg()
    snap = ds.snapshot_named("s")
    dead = list(snap.deadlist)
    assert len(dead) >= 8
    freed = D.destroy_snapshot(ds, "s")
    assert freed == sum(pool.rows_of(r) * pool.width for r in dead)
    pool.check_space()


def test_destroy_middle_snapshot_transfers(tmp_path):
    pool = make_pool(str(tmp_path))
    ds = D.create_dataset(pool, "tank/fs", record_size=4096)
    D.write_file(ds, 1, 0, os.urandom(6 * 4096))
    D.snapshot(ds, "s1")
    D.write_file(ds, 1, 0, os.urandom(2 * 4096))       # displaces blocks born before s1
    D.write_file(ds, 2, 0, os.urandom(3 * 4096))
    D.snapshot(ds, "s2")
    D.write_file(ds, 1, 0, os.urandom(4096))           # displaces one born between s1 and s2
    D.truncate_file(ds, 2, 0)
    D.snapshot(ds, "s3")
    D.write_file(ds, 1, 4096 * 5, os.urandom(4096))
    pool.commit_txg()
    s1_txg = ds.snapshot_named("s1").txg
    reach_before = live_blocks(pool)
    scrub_before = pool.scrub().blocks_examined
    hashes = {n: D.content_hash(ds.snapshot_named(n), pool) for n in ("s1", "s3")}
    s2_dead = list(ds.snapshot_named("s2").deadlist)
    freed = D.destroy_snapshot(ds, "s2")
    reach_after = live_blocks(pool)
    gone = set(reach_before) - set(reach_after)
    # the reachability oracle and the deadlist walk agree on what was freed
    assert freed == sum(pool.rows_of(reach_before[r]) * pool.width for r in gone)
    assert set(reach_after) <= set(reach_before)
    moved = [r for r in s2_dead if r.birth_txg <= s1_txg]
    assert all(r in ds.snapshot_named("s1").deadlist for r in moved)
    assert pool.scrub().blocks_examined == scrub_before - len(gone)
    for n, h in hashes.items():
        assert D.content_hash(ds.snapshot_named(n), pool) == h
    pool.check_space()


def test_rollback(pool):
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, b"v1")
    s1 = D.snapshot(ds, "s1")
    D.write_file(ds, 1, 0, b"v2")
    D.snapshot(ds, "s2")
    D.write_file(ds, 1, 0, b"v3")
    D.rollback(ds, s1)
    assert D.read_file(ds, 1, 0, 2) == b"v1"
    assert [s.name for s in ds.snapshots] == ["s1"]
    pool.check_space()


def test_rollback_blocked_by_clone_is_atomic(pool):
    ds = D.create_dataset(pool, "tank/fs")
    D.write_file(ds, 1, 0, b"v1")
    s1 = D.snapshot(ds, "s1")
    s2 = D.snapshot(ds, "s2")
    D.snapshot(ds, "s3")
    D.clone(pool, s2, "tank/c")
    with pytest.raises(HasDependents):
        D.rollback(D.get_dataset(pool, "tank/fs"), s1)
    assert [s.name for s in D.get_dataset(pool, "tank/fs").snapshots] == ["s1", "s2", "s3"]


def test_space_closure(pool):
    ds = D.create_dataset(pool, "tank/fs", record_size=8192)
    D.write_file(ds, 1, 0, os.urandom(100_000))
    s = D.snapshot(ds, "s")
    D.write_file(ds, 1, 0, os.urandom(50_000))
    c = D.clone(pool, s, "tank/c")
    D.write_file(c, 3, 0, os.urandom(20_000))
    pool.commit_txg()
    rep = D.space_report(ds)
    assert rep["referenced_bytes"] >= 100_000 and rep["available_bytes"] == pool.free_bytes()
    used = sum(D.space_report(d)["used_bytes"] for d in pool.catalog.datasets.values())
    assert used + D.metadata_bytes(pool) + pool.free_bytes() == pool.data_capacity_bytes


def test_names_and_record_size(pool):
    with pytest.raises(ValueError):
        D.create_dataset(pool, "tank/bad@name")
    with pytest.raises(ValueError):
        D.create_dataset(pool, "tank/rs", record_size=3000)
    D.create_dataset(pool, "tank/fs")
    with pytest.raises(NameInUse):
        D.create_dataset(pool, "tank/fs")
    with pytest.raises(KeyError):
        D.get_dataset(pool, "tank/none")


def _reopen(p):
    paths = device_paths(p)
    p.close()
    return open_images(paths)


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 2 ** 32))
def test_shadow_model_short_histories(tmp_path_factory, seed):
    pool = make_pool(str(tmp_path_factory.mktemp("shadow")), n=3, sectors=8192)
    pool, counts = run_history(pool, random.Random(seed), 400, reopen=_reopen)
    assert counts.get("read", 0) > 0
    pool.close()
