"""Random edit histories on a single dataset, shared by the stream tests."""

from poolforge import dataset as D


def random_edit(ds, rng, record_size, max_objects=5, span_records=16):
    oid = rng.randrange(max_objects)
    r = rng.random()
    if r < 0.15:
        D.truncate_file(ds, oid, rng.randrange(span_records * record_size))
        return
    off = rng.randrange(span_records * record_size)
    n = rng.randrange(1, 3 * record_size)
    if r < 0.3:
        data = bytes(n)
    elif r < 0.55:
        data = bytes([rng.randrange(1, 256)]) * n
    else:
        data = rng.randbytes(n)
    D.write_file(ds, oid, off, data)


def random_history(pool, rng, name, nsnaps, record_size=4096, edits=(0, 8)):
    """Create ``name`` and take ``nsnaps`` snapshots with random edits between."""
    ds = D.create_dataset(pool, name, record_size=record_size)
    snaps = []
    for k in range(nsnaps):
        for _ in range(rng.randrange(*edits) if k else rng.randrange(1, edits[1] + 1)):
            random_edit(ds, rng, record_size)
        snaps.append(D.snapshot(ds, f"s{k}"))
    return ds, snaps
