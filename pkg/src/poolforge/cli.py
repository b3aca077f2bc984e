"""Command-line front end: ``poolforge <group> <command> ...``.

Pools are remembered in ``$POOLFORGE_HOME/pools.json`` (default
``~/.poolforge``) so later commands can name them. Non-silent device faults
persist in a ``<device>.faults.json`` sidecar and are re-applied on open.

Exit codes: 0 success, 1 usage error, 2 operational error, 3 scenario failed.
"""

import argparse
import json
import os
import sys

from . import dataset as dsops
from . import sendstream, simnet
from .metrics import MetricsBundle, MetricsError, export_csv, render_svg
from .pool import CommitAborted, PoolError, create_pool, import_pool
from .simnet import ScenarioError, ScenarioFailed
from .spacemap import OutOfSpace
from .vdev import (DEFAULT_SECTOR_SIZE, FaultKind, FaultSpec, VdevError, create_device,
                   open_device)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_OPERATIONAL = 2
EXIT_SCENARIO_FAILED = 3

# module operation -> CLI command fronting it
OPERATIONS = {
    "vdev.create_device": "pool create",
    "vdev.inject_fault": "fault inject",
    "vdev.clear_faults": "fault clear",
    "pool.create_pool": "pool create",
    "pool.import_pool": "pool import",
    "pool.status": "pool status",
    "pool.scrub": "pool scrub",
    "pool.check_space": "pool check",
    "pool.export": "pool export",
    "dataset.create_dataset": "fs create",
    "dataset.write_file": "fs write",
    "dataset.read_file": "fs read",
    "dataset.truncate_file": "fs truncate",
    "dataset.snapshot": "fs snapshot",
    "dataset.clone": "fs clone",
    "dataset.rollback": "fs rollback",
    "dataset.destroy_snapshot": "fs destroy-snapshot",
    "dataset.destroy_dataset": "fs destroy",
    "dataset.space_report": "fs space",
    "dataset.content_hash": "fs hash",
    "dataset.list": "fs list",
    "sendstream.send_full": "send",
    "sendstream.send_incremental": "send",
    "sendstream.receive": "recv",
    "sendstream.diff": "diff",
    "simnet.load_scenario": "sim run",
    "simnet.run_scenario": "sim run",
    "metrics.export_csv": "metrics export",
    "metrics.render_svg": "metrics plot",
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage().rstrip()}")


# ------------------------------------------------------------------ pool cache


def home_dir() -> str:
    return os.environ.get("POOLFORGE_HOME") or os.path.join(os.path.expanduser("~"), ".poolforge")


def _cache_path() -> str:
    return os.path.join(home_dir(), "pools.json")


def _load_cache() -> dict:
    try:
        with open(_cache_path(), encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        return {}


def _save_cache(cache: dict) -> None:
    os.makedirs(home_dir(), exist_ok=True)
    tmp = _cache_path() + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(cache, fh, indent=2, sort_keys=True)
    os.replace(tmp, _cache_path())


def _sidecar(path: str) -> str:
    return path + ".faults.json"


def _open_dev(path: str):
    if not os.path.exists(path):
        return None
    dev = open_device(path)
    try:
        with open(_sidecar(path), encoding="utf-8") as fh:
            dev.faults.extend(FaultSpec.from_dict(d) for d in json.load(fh))
    except FileNotFoundError:
        pass
    return dev


def _open_pool(name: str):
    cache = _load_cache()
    if name not in cache:
        raise PoolError(f"unknown pool {name!r} (not in {_cache_path()})")
    return import_pool([_open_dev(p) for p in cache[name]["devices"]])


def _split_target(spec: str):
    """``pool/ds[@snap]`` -> (pool, dataset, snap)."""
    ds, _, snap = spec.partition("@")
    pool = ds.split("/", 1)[0]
    if not pool or ds == pool:
        raise UsageError(f"expected <pool>/<dataset>[@snapshot], got {spec!r}")
    return pool, ds, snap or None


# ------------------------------------------------------------------ output


class Reporter:
    def __init__(self, fmt: str, out=None):
        self.fmt = fmt
        self.out = out or sys.stdout

    def emit(self, data: dict, text: str) -> None:
        if self.fmt == "json":
            self.out.write(json.dumps(data, sort_keys=True) + "\n")
        else:
            self.out.write(text.rstrip("\n") + "\n")


def _kv(d: dict) -> str:
    return "\n".join(f"{k}: {v}" for k, v in d.items())


# ------------------------------------------------------------------ commands


def cmd_pool_create(args, rep):
    paths = [os.path.abspath(p) for p in args.dev.split(",") if p]
    cap_sectors = simnet.parse_size(args.capacity) // args.sector_size
    devs = []
    for p in paths:
        devs.append(open_device(p) if os.path.exists(p)
                    else create_device(p, cap_sectors, args.sector_size))
    pool = create_pool(devs, args.name, force=args.force)
    try:
        cache = _load_cache()
        cache[args.name] = {"devices": paths}
        _save_cache(cache)
        st = pool.status()
    finally:
        pool.close()
    rep.emit(st, _kv(st))


def cmd_pool_import(args, rep):
    cache = _load_cache()
    if args.dev:
        paths = [os.path.abspath(p) for p in args.dev.split(",") if p]
    elif args.name in cache:
        paths = cache[args.name]["devices"]
    else:
        raise UsageError("pool import needs --dev for a pool not in the cache")
    pool = import_pool([_open_dev(p) for p in paths])
    try:
        if args.name and args.name != pool.name:
            raise PoolError(f"devices hold pool {pool.name!r}, not {args.name!r}")
        cache[pool.name] = {"devices": paths}
        _save_cache(cache)
        st = pool.status()
    finally:
        pool.close()
    rep.emit(st, _kv(st))


def cmd_pool_status(args, rep):
    names = [args.name] if args.name else sorted(_load_cache())
    out = []
    for name in names:
        pool = _open_pool(name)
        try:
            out.append(pool.status())
        finally:
            pool.close()
    data = out[0] if args.name else {"pools": out}
    text = "\n\n".join(_kv(st) for st in out) or "no pools"
    rep.emit(data, text)


def _with_pool(name, fn):
    pool = _open_pool(name)
    try:
        return fn(pool)
    finally:
        pool.close()


def cmd_pool_scrub(args, rep):
    report = _with_pool(args.name, lambda p: p.scrub().to_dict())
    if report["permanent_errors"]:
        raise PoolError(f"scrub found {report['permanent_errors']} permanent errors: {report}")
    rep.emit(report, _kv(report))


def cmd_pool_check(args, rep):
    def run(pool):
        pool.check_space()
        return {"name": pool.name, "txg": pool.txg, "space": "consistent",
                "free_bytes": pool.free_bytes()}
    data = _with_pool(args.name, run)
    rep.emit(data, _kv(data))


def cmd_pool_export(args, rep):
    cache = _load_cache()
    if args.name not in cache:
        raise PoolError(f"unknown pool {args.name!r}")
    del cache[args.name]
    _save_cache(cache)
    rep.emit({"exported": args.name}, f"exported {args.name}")


def cmd_fs_create(args, rep):
    pool_name, ds, snap = _split_target(args.dataset)
    if snap:
        raise UsageError("fs create takes a dataset, not a snapshot")

    def run(pool):
        d = dsops.create_dataset(pool, ds, args.record_size)
        return {"dataset": d.name, "guid": d.guid.hex(), "record_size": d.record_size,
                "txg": pool.txg}
    data = _with_pool(pool_name, run)
    rep.emit(data, _kv(data))


def _input_bytes(args) -> bytes:
    if args.data is not None:
        return args.data.encode("utf-8")
    if args.hex is not None:
        return bytes.fromhex(args.hex)
    if args.file is not None:
        with open(args.file, "rb") as fh:
            return fh.read()
    return sys.stdin.buffer.read()


def cmd_fs_write(args, rep):
    pool_name, ds, snap = _split_target(args.dataset)
    payload = _input_bytes(args)

    def run(pool):
        target = dsops.get_dataset(pool, ds)
        if snap:
            target = target.snapshot_named(snap)
        dsops.write_file(target, args.object, args.offset, payload)
        pool.commit_txg()
        return {"dataset": ds, "object": args.object, "offset": args.offset,
                "bytes": len(payload), "txg": pool.txg}
    data = _with_pool(pool_name, run)
    rep.emit(data, _kv(data))


def cmd_fs_truncate(args, rep):
    pool_name, ds, _ = _split_target(args.dataset)

    def run(pool):
        dsops.truncate_file(dsops.get_dataset(pool, ds), args.object, args.size)
        pool.commit_txg()
        return {"dataset": ds, "object": args.object, "size": args.size, "txg": pool.txg}
    data = _with_pool(pool_name, run)
    rep.emit(data, _kv(data))


def _resolve(pool, ds, snap):
    d = dsops.get_dataset(pool, ds)
    return d.snapshot_named(snap) if snap else d


def cmd_fs_read(args, rep):
    pool_name, ds, snap = _split_target(args.dataset)
    length = args.length
    data = _with_pool(pool_name, lambda p: dsops.read_file(
        _resolve(p, ds, snap), args.object, args.offset,
        length if length is not None else 2 ** 62, p))
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(data)
        rep.emit({"bytes": len(data), "out": args.out}, f"{len(data)} bytes -> {args.out}")
    elif rep.fmt == "json":
        rep.emit({"bytes": len(data), "hex": data.hex()}, "")
    else:
        sys.stdout.flush()
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


def cmd_fs_snapshot(args, rep):
    pool_name, ds, snap = _split_target(args.snapshot)
    if not snap:
        raise UsageError("fs snapshot needs <pool>/<dataset>@<name>")

    def run(pool):
        s = dsops.snapshot(dsops.get_dataset(pool, ds), snap)
        return {"snapshot": s.full_name, "txg": s.txg, "guid": s.guid.hex()}
    data = _with_pool(pool_name, run)
    rep.emit(data, _kv(data))


def cmd_fs_clone(args, rep):
    pool_name, ds, snap = _split_target(args.snapshot)
    new_pool, new_ds, _ = _split_target(args.new_name)
    if not snap or new_pool != pool_name:
        raise UsageError("fs clone <pool>/<ds>@<snap> <pool>/<new>")

    def run(pool):
        c = dsops.clone(pool, dsops.get_dataset(pool, ds).snapshot_named(snap), new_ds)
        return {"dataset": c.name, "origin": c.origin.full_name, "guid": c.guid.hex()}
    data = _with_pool(pool_name, run)
    rep.emit(data, _kv(data))


def cmd_fs_rollback(args, rep):
    pool_name, ds, snap = _split_target(args.snapshot)
    if not snap:
        raise UsageError("fs rollback needs <pool>/<dataset>@<name>")

    def run(pool):
        d = dsops.get_dataset(pool, ds)
        dsops.rollback(d, d.snapshot_named(snap))
        return {"dataset": ds, "snapshot": snap, "txg": pool.txg}
    data = _with_pool(pool_name, run)
    rep.emit(data, _kv(data))


def cmd_fs_destroy_snapshot(args, rep):
    pool_name, ds, snap = _split_target(args.snapshot)
    if not snap:
        raise UsageError("fs destroy-snapshot needs <pool>/<dataset>@<name>")

    def run(pool):
        freed = dsops.destroy_snapshot(dsops.get_dataset(pool, ds), snap)
        return {"snapshot": f"{ds}@{snap}", "freed_sectors": freed, "txg": pool.txg}
    data = _with_pool(pool_name, run)
    rep.emit(data, _kv(data))


def cmd_fs_destroy(args, rep):
    pool_name, ds, snap = _split_target(args.dataset)
    if snap:
        raise UsageError("use fs destroy-snapshot for snapshots")
    _with_pool(pool_name, lambda p: dsops.destroy_dataset(p, ds))
    rep.emit({"destroyed": ds}, f"destroyed {ds}")


def cmd_fs_space(args, rep):
    pool_name, ds, _ = _split_target(args.dataset)
    data = _with_pool(pool_name, lambda p: dsops.space_report(dsops.get_dataset(p, ds)))
    rep.emit(data, _kv(data))


def cmd_fs_hash(args, rep):
    pool_name, ds, snap = _split_target(args.dataset)
    digest = _with_pool(pool_name, lambda p: dsops.content_hash(_resolve(p, ds, snap), p))
    rep.emit({"target": args.dataset, "content_hash": digest}, digest)


def cmd_fs_list(args, rep):
    def run(pool):
        rows = []
        for name in sorted(pool.catalog.datasets):
            d = pool.catalog.datasets[name]
            rows.append({"dataset": name, "origin": d.origin.full_name if d.origin else None,
                         "snapshots": [{"name": s.name, "txg": s.txg, "guid": s.guid.hex()}
                                       for s in d.snapshots]})
        return rows
    rows = _with_pool(args.pool, run)
    text = "\n".join(f"{r['dataset']}" + "".join(f"\n  @{s['name']} txg={s['txg']}"
                                                 for s in r["snapshots"]) for r in rows)
    rep.emit({"datasets": rows}, text or "no datasets")


def cmd_send(args, rep):
    pool_name, ds, snap = _split_target(args.snapshot)
    if not snap:
        raise UsageError("send needs <pool>/<dataset>@<snapshot>")
    if bool(args.full) == bool(args.from_snap):
        raise UsageError("send needs exactly one of --full or --from <snap>")

    def run(pool):
        d = dsops.get_dataset(pool, ds)
        target = d.snapshot_named(snap)
        if args.full:
            return sendstream.send_full(pool, target)
        base_spec = args.from_snap
        if "@" not in base_spec:
            base = d.snapshot_named(base_spec)
        else:
            _, bds, bsnap = _split_target(base_spec)
            base = dsops.get_dataset(pool, bds).snapshot_named(bsnap)
        return sendstream.send_incremental(pool, base, target)
    stream = _with_pool(pool_name, run)
    if args.out:
        with open(args.out, "wb") as fh:
            fh.write(stream)
        rep.emit({"snapshot": args.snapshot, "bytes": len(stream), "out": args.out},
                 f"{len(stream)} bytes -> {args.out}")
    else:
        sys.stdout.flush()
        sys.stdout.buffer.write(stream)
        sys.stdout.buffer.flush()


def cmd_recv(args, rep):
    if args.input:
        with open(args.input, "rb") as fh:
            stream = fh.read()
    else:
        stream = sys.stdin.buffer.read()

    def run(pool):
        if args.dataset:
            _, target, _ = _split_target(args.dataset)
        else:  # keep the sender's dataset path under the receiving pool
            sent = sendstream.read_header(stream).dataset_name.partition("@")[0]
            target = pool.name + "/" + sent.split("/", 1)[1] if "/" in sent else (
                pool.name + "/" + sent)
        s = sendstream.receive(pool, stream, target_name=target, force=args.force)
        return {"snapshot": s.full_name, "guid": s.guid.hex(), "txg": s.txg}
    data = _with_pool(args.pool, run)
    rep.emit(data, _kv(data))


def cmd_diff(args, rep):
    pool_name, ds_a, snap_a = _split_target(args.a)
    pool_b, ds_b, snap_b = _split_target(args.b)
    if not snap_a or not snap_b or pool_b != pool_name:
        raise UsageError("diff <pool>/<ds>@<a> <pool>/<ds>@<b>")

    def run(pool):
        a = dsops.get_dataset(pool, ds_a).snapshot_named(snap_a)
        b = dsops.get_dataset(pool, ds_b).snapshot_named(snap_b)
        return sendstream.diff(pool, a, b)
    ranges = _with_pool(pool_name, run)
    rows = [{"object": o, "start": s, "end": e, "kind": k} for o, s, e, k in ranges]
    text = "\n".join(f"{k:6} object={o} [{s}, {e})" for o, s, e, k in ranges)
    rep.emit({"changes": rows}, text or "no changes")


def cmd_fault_inject(args, rep):
    path = os.path.abspath(args.device)
    dev = _open_dev(path)
    if dev is None:
        raise PoolError(f"no device {path}")
    try:
        spec = FaultSpec(FaultKind(args.kind), args.start, args.count, args.param)
        dev.inject_fault(spec)
        if spec.kind is not FaultKind.SILENT_CORRUPTION:
            # silent corruption damages the image itself; nothing to keep
            with open(_sidecar(path), "w", encoding="utf-8") as fh:
                json.dump([f.to_dict() for f in dev.faults], fh, indent=2)
    finally:
        dev.close()
    rep.emit({"device": path, "fault": spec.to_dict()}, f"injected {spec.kind.value} on {path}")


def cmd_fault_clear(args, rep):
    path = os.path.abspath(args.device)
    try:
        os.remove(_sidecar(path))
    except FileNotFoundError:
        pass
    rep.emit({"device": path, "cleared": True}, f"cleared faults on {path}")


def cmd_sim_run(args, rep):
    scenario = simnet.resolve_scenario(args.scenario)
    seed = args.seed
    if seed is None and os.environ.get("POOLFORGE_SEED"):
        seed = int(os.environ["POOLFORGE_SEED"])
    if seed is not None:
        scenario.seed = seed
    if args.duration is not None:
        scenario.duration_s = args.duration
        scenario.workload = [op for op in scenario.workload if op.at_ms < scenario.duration_ms]
    result = simnet.run_scenario(scenario, check=False)
    paths = simnet.write_outputs(result, args.out) if args.out else {}
    summary = result.summary()
    summary.pop("tick_reports")
    summary["outputs"] = {k: v for k, v in paths.items() if k != "series"}
    text = _kv({k: v for k, v in summary.items() if k not in ("nodes", "outputs")})
    if not result.consistent:
        raise ScenarioFailed(f"target diverged from source: {text}", result)
    rep.emit(summary, text)


def _load_bundle(path: str) -> MetricsBundle:
    with open(path, encoding="utf-8") as fh:
        return MetricsBundle.from_json(fh.read())


def cmd_metrics_export(args, rep):
    bundle = _load_bundle(args.bundle)
    written = export_csv(bundle, args.out, wide=args.wide)
    rep.emit({"written": written}, "\n".join(written))


def cmd_metrics_plot(args, rep):
    bundle = _load_bundle(args.bundle)
    series = [s for s in args.series.split(",") if s] if args.series else bundle.names()
    render_svg(bundle, series, args.out)
    rep.emit({"out": args.out, "series": series}, f"wrote {args.out}")


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="poolforge", description="copy-on-write RAID-Z1 pool toolkit")
    p.add_argument("--format", choices=("text", "json"), default="text")
    groups = p.add_subparsers(dest="group", required=True, parser_class=_Parser)

    pool = groups.add_parser("pool").add_subparsers(dest="cmd", required=True,
                                                    parser_class=_Parser)
    c = pool.add_parser("create")
    c.add_argument("--dev", required=True, help="comma-separated device files")
    c.add_argument("--capacity", default="64MiB", help="size for device files created")
    c.add_argument("--sector-size", type=int, default=DEFAULT_SECTOR_SIZE)
    c.add_argument("--force", action="store_true")
    c.add_argument("name")
    c.set_defaults(fn=cmd_pool_create)
    c = pool.add_parser("import")
    c.add_argument("--dev")
    c.add_argument("name", nargs="?")
    c.set_defaults(fn=cmd_pool_import)
    for name, fn, optional in (("status", cmd_pool_status, True), ("scrub", cmd_pool_scrub, False),
                               ("check", cmd_pool_check, False),
                               ("export", cmd_pool_export, False)):
        c = pool.add_parser(name)
        c.add_argument("name", nargs="?" if optional else None)
        c.set_defaults(fn=fn)

    fs = groups.add_parser("fs").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    c = fs.add_parser("create")
    c.add_argument("--record-size", type=int, default=dsops.DEFAULT_RECORD_SIZE)
    c.add_argument("dataset")
    c.set_defaults(fn=cmd_fs_create)
    c = fs.add_parser("write")
    c.add_argument("dataset")
    c.add_argument("object", type=int)
    c.add_argument("offset", type=int)
    src = c.add_mutually_exclusive_group()
    src.add_argument("--data")
    src.add_argument("--hex")
    src.add_argument("--file")
    c.set_defaults(fn=cmd_fs_write)
    c = fs.add_parser("read")
    c.add_argument("dataset")
    c.add_argument("object", type=int)
    c.add_argument("offset", type=int, nargs="?", default=0)
    c.add_argument("length", type=int, nargs="?")
    c.add_argument("--out")
    c.set_defaults(fn=cmd_fs_read)
    c = fs.add_parser("truncate")
    c.add_argument("dataset")
    c.add_argument("object", type=int)
    c.add_argument("size", type=int)
    c.set_defaults(fn=cmd_fs_truncate)
    for name, fn in (("snapshot", cmd_fs_snapshot), ("destroy-snapshot", cmd_fs_destroy_snapshot),
                     ("rollback", cmd_fs_rollback)):
        c = fs.add_parser(name)
        c.add_argument("snapshot")
        c.set_defaults(fn=fn)
    c = fs.add_parser("clone")
    c.add_argument("snapshot")
    c.add_argument("new_name")
    c.set_defaults(fn=cmd_fs_clone)
    for name, fn in (("space", cmd_fs_space), ("destroy", cmd_fs_destroy), ("hash", cmd_fs_hash)):
        c = fs.add_parser(name)
        c.add_argument("dataset")
        c.set_defaults(fn=fn)
    c = fs.add_parser("list")
    c.add_argument("pool")
    c.set_defaults(fn=cmd_fs_list)

    c = groups.add_parser("send")
    c.add_argument("snapshot")
    c.add_argument("--full", action="store_true")
    c.add_argument("--from", dest="from_snap")
    c.add_argument("-o", "--out")
    c.set_defaults(fn=cmd_send)
    c = groups.add_parser("recv")
    c.add_argument("pool")
    c.add_argument("dataset", nargs="?")
    c.add_argument("-i", "--input")
    c.add_argument("--force", action="store_true")
    c.set_defaults(fn=cmd_recv)
    c = groups.add_parser("diff")
    c.add_argument("a")
    c.add_argument("b")
    c.set_defaults(fn=cmd_diff)

    fault = groups.add_parser("fault").add_subparsers(dest="cmd", required=True,
                                                      parser_class=_Parser)
    c = fault.add_parser("inject")
    c.add_argument("device")
    c.add_argument("--kind", required=True, choices=[k.value for k in FaultKind])
    c.add_argument("--start", type=int, default=0)
    c.add_argument("--count", type=int, default=0)
    c.add_argument("--param", type=int, default=0,
                   help="corruption seed, or added latency in virtual ms")
    c.set_defaults(fn=cmd_fault_inject)
    c = fault.add_parser("clear")
    c.add_argument("device")
    c.set_defaults(fn=cmd_fault_clear)

    sim = groups.add_parser("sim").add_subparsers(dest="cmd", required=True, parser_class=_Parser)
    c = sim.add_parser("run")
    c.add_argument("scenario", help="config path or bundled scenario name")
    c.add_argument("--seed", type=int)
    c.add_argument("--duration", type=float)
    c.add_argument("--out", help="directory for metrics, SVGs and the event log")
    c.set_defaults(fn=cmd_sim_run)

    met = groups.add_parser("metrics").add_subparsers(dest="cmd", required=True,
                                                      parser_class=_Parser)
    c = met.add_parser("export")
    c.add_argument("bundle", help="metrics.json written by sim run --out")
    c.add_argument("--out", required=True)
    c.add_argument("--wide", action="store_true")
    c.set_defaults(fn=cmd_metrics_export)
    c = met.add_parser("plot")
    c.add_argument("bundle")
    c.add_argument("--series", help="comma-separated series names (default: all)")
    c.add_argument("--out", required=True)
    c.set_defaults(fn=cmd_metrics_plot)
    return p


def subcommands() -> list:
    """Every ``group [command]`` the parser accepts."""
    out = []
    parser = build_parser()
    for action in parser._subparsers._group_actions:
        for group, sub in action.choices.items():
            nested = [a for a in sub._actions if isinstance(a, argparse._SubParsersAction)]
            if nested:
                out.extend(f"{group} {cmd}" for cmd in nested[0].choices)
            else:
                out.append(group)
    return out


_OPERATIONAL = (PoolError, CommitAborted, OutOfSpace, VdevError, dsops.DatasetError,
                sendstream.SendError, ScenarioError, MetricsError, KeyError, ValueError, OSError)


def main(argv=None, stdout=None, stderr=None) -> int:
    stderr = stderr or sys.stderr
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        stderr.write(f"poolforge: {exc}\n")
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    rep = Reporter(args.format, stdout)
    try:
        args.fn(args, rep)
    except UsageError as exc:
        stderr.write(f"poolforge: {exc}\n")
        return EXIT_USAGE
    except ScenarioFailed as exc:
        stderr.write(f"poolforge: scenario failed: {exc}\n")
        return EXIT_SCENARIO_FAILED
    except _OPERATIONAL as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        stderr.write(f"poolforge: {type(exc).__name__}: {msg}\n")
        return EXIT_OPERATIONAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
