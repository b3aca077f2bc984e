"""Full-copy reference model for datasets, snapshots and clones.

Every dataset head and every snapshot is a plain ``{object_id: bytearray}``;
snapshots and clones copy the whole dict. ``run_history`` drives a real pool
and the model with the same random operations and compares every read.
"""

import copy

from poolforge import dataset as D
from poolforge.dataset import HasDependents, NoSuchObject, ReadOnlyError


class Divergence(AssertionError):
    pass


class ShadowModel:
    def __init__(self):
        self.heads = {}        # dataset -> {oid: bytearray}
        self.snaps = {}        # dataset -> [(name, {oid: bytearray})]
        self.origin = {}       # clone dataset -> (dataset, snap name)

    def create(self, name):
        self.heads[name] = {}
        self.snaps[name] = []

    def write(self, name, oid, off, data):
        buf = self.heads[name].setdefault(oid, bytearray())
        if len(buf) < off + len(data):
            buf.extend(bytes(off + len(data) - len(buf)))
        buf[off:off + len(data)] = data

    def truncate(self, name, oid, size):
        buf = self.heads[name].setdefault(oid, bytearray())
        if size < len(buf):
            del buf[size:]
        else:
            buf.extend(bytes(size - len(buf)))

    def snapshot(self, name, snap):
        self.snaps[name].append((snap, copy.deepcopy(self.heads[name])))

    def snap_state(self, name, snap):
        return next(s for n, s in self.snaps[name] if n == snap)

    def has_clones(self, name, snap):
        return (name, snap) in self.origin.values()

    def clone(self, name, snap, new):
        self.heads[new] = copy.deepcopy(self.snap_state(name, snap))
        self.snaps[new] = []
        self.origin[new] = (name, snap)

    def destroy_snapshot(self, name, snap):
        self.snaps[name] = [(n, s) for n, s in self.snaps[name] if n != snap]

    def rollback(self, name, snap):
        names = [n for n, _ in self.snaps[name]]
        keep = names.index(snap) + 1
        self.snaps[name] = self.snaps[name][:keep]
        self.heads[name] = copy.deepcopy(self.snap_state(name, snap))

    def destroy_dataset(self, name):
        del self.heads[name]
        del self.snaps[name]
        self.origin.pop(name, None)


def _expect_read(state, oid, off, n):
    if oid not in state:
        return None
    return bytes(state[oid][off:off + n])


def run_history(pool, rng, n_ops, reopen=None, check_space_every=50, max_datasets=6,
                max_snaps=5, record_size=4096):
    """Drive ``n_ops`` random operations; raise Divergence on any mismatch.

    ``reopen(pool)`` must export the pool and return a freshly imported one;
    it is exercised now and then when given. Returns ``(pool, counts)``.
    """
    model = ShadowModel()
    prefix = pool.name
    counts = {}
    serial = [0]

    def fresh(kind):
        serial[0] += 1
        return f"{kind}{serial[0]}"

    def ds_of(name):
        return D.get_dataset(pool, name)

    def verify_read(name, snap, oid, off, n):
        expect = _expect_read(model.snap_state(name, snap) if snap else model.heads[name],
                              oid, off, n)
        target = ds_of(name) if snap is None else ds_of(name).snapshot_named(snap)
        try:
            got = D.read_file(target, oid, off, n, pool)
        except NoSuchObject:
            got = None
        if got != expect:
            raise Divergence(f"read {name}@{snap} obj {oid} [{off},{off + n}): "
                             f"got {None if got is None else len(got)} bytes, "
                             f"want {None if expect is None else len(expect)}")

    def check_space():
        pool.check_space()
        used = sum(D.space_report(ds)["used_bytes"] for ds in pool.catalog.datasets.values())
        total = used + D.metadata_bytes(pool) + pool.free_bytes()
        if total != pool.data_capacity_bytes:
            raise Divergence(f"space closure off by {total - pool.data_capacity_bytes}")

    name = f"{prefix}/root"
    D.create_dataset(pool, name, record_size=record_size)
    model.create(name)
    for step in range(n_ops):
        names = sorted(model.heads)
        name = rng.choice(names)
        r = rng.random()
        if r < 0.34:
            op = "write"
            oid = rng.randrange(6)
            off = rng.randrange(6 * record_size)
            n = rng.randrange(1, 2 * record_size)
            style = rng.random()
            if style < 0.2:
                data = bytes(n)
            elif style < 0.5:
                data = bytes([rng.randrange(256)]) * n
            else:
                data = rng.randbytes(n)
            D.write_file(ds_of(name), oid, off, data)
            model.write(name, oid, off, data)
        elif r < 0.40:
            op = "truncate"
            oid = rng.randrange(6)
            size = rng.randrange(8 * record_size)
            D.truncate_file(ds_of(name), oid, size)
            model.truncate(name, oid, size)
        elif r < 0.70:
            op = "read"
            snaps = [n for n, _ in model.snaps[name]]
            snap = rng.choice(snaps) if snaps and rng.random() < 0.5 else None
            verify_read(name, snap, rng.randrange(7), rng.randrange(8 * record_size),
                        rng.randrange(1, 3 * record_size))
        elif r < 0.78:
            op = "commit"
            pool.commit_txg()
        elif r < 0.85:
            op = "snapshot"
            if len(model.snaps[name]) >= max_snaps:
                op = "destroy_snapshot"
                snap = model.snaps[name][0][0]
                if model.has_clones(name, snap):
                    try:
                        D.destroy_snapshot(ds_of(name), snap)
                    except HasDependents:
                        op = "refused"
                    else:
                        raise Divergence("destroy of a cloned snapshot succeeded")
                else:
                    D.destroy_snapshot(ds_of(name), snap)
                    model.destroy_snapshot(name, snap)
            else:
                snap = fresh("s")
                D.snapshot(ds_of(name), snap)
                model.snapshot(name, snap)
        elif r < 0.89:
            op = "destroy_snapshot"
            snaps = [n for n, _ in model.snaps[name]]
            if snaps:
                snap = rng.choice(snaps)
                if model.has_clones(name, snap):
                    try:
                        D.destroy_snapshot(ds_of(name), snap)
                    except HasDependents:
                        op = "refused"
                    else:
                        raise Divergence("destroy of a cloned snapshot succeeded")
                else:
                    D.destroy_snapshot(ds_of(name), snap)
                    model.destroy_snapshot(name, snap)
        elif r < 0.92:
            op = "clone"
            snaps = [n for n, _ in model.snaps[name]]
            if snaps and len(names) < max_datasets:
                snap = rng.choice(snaps)
                new = f"{prefix}/{fresh('c')}"
                D.clone(pool, ds_of(name).snapshot_named(snap), new)
                model.clone(name, snap, new)
        elif r < 0.95:
            op = "rollback"
            snaps = [n for n, _ in model.snaps[name]]
            if snaps:
                snap = rng.choice(snaps)
                later = snaps[snaps.index(snap) + 1:]
                ds = ds_of(name)
                if any(model.has_clones(name, s) for s in later):
                    try:
                        D.rollback(ds, ds.snapshot_named(snap))
                    except HasDependents:
                        op = "refused"
                    else:
                        raise Divergence("rollback over a cloned snapshot succeeded")
                else:
                    D.rollback(ds, ds.snapshot_named(snap))
                    model.rollback(name, snap)
        elif r < 0.97:
            op = "destroy_dataset"
            if len(names) > 1:
                blocked = any(model.has_clones(name, s) for s, _ in model.snaps[name])
                if blocked:
                    try:
                        D.destroy_dataset(pool, name)
                    except HasDependents:
                        op = "refused"
                    else:
                        raise Divergence("destroy of a dataset with clones succeeded")
                else:
                    D.destroy_dataset(pool, name)
                    model.destroy_dataset(name)
        elif r < 0.98:
            op = "write_snapshot"
            snaps = [n for n, _ in model.snaps[name]]
            if snaps:
                try:
                    D.write_file(ds_of(name).snapshot_named(snaps[0]), 0, 0, b"x")
                except ReadOnlyError:
                    pass
                else:
                    raise Divergence("snapshot accepted a write")
        else:
            op = "reopen"
            pool.commit_txg()
            if reopen is not None:
                pool = reopen(pool)
        counts[op] = counts.get(op, 0) + 1
        if check_space_every and step % check_space_every == 0 and op in (
                "commit", "snapshot", "destroy_snapshot", "clone", "rollback",
                "destroy_dataset", "reopen"):
            check_space()
    pool.commit_txg()
    check_space()
    # final sweep: every object of every head and snapshot, whole
    for name in sorted(model.heads):
        for snap in [None] + [n for n, _ in model.snaps[name]]:
            state = model.snap_state(name, snap) if snap else model.heads[name]
            for oid in range(7):
                size = len(state.get(oid, b""))
                verify_read(name, snap, oid, 0, size + 1)
    return pool, counts
