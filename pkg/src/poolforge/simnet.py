"""Deterministic discrete-event simulation of NAS-to-NAS replication.

Nodes are pools on file-backed devices; a link has bandwidth, latency and
per-segment loss. A workload writes to the source dataset and every
``interval`` virtual seconds a replication tick snapshots the source, sends
an incremental stream (optionally deduplicated against what the target
already holds), moves it across the link and receives it on the target.

The clock is integer virtual milliseconds. Events are ordered by
``(time, insertion sequence)``, so a scenario and seed fix every output byte.
"""

import hashlib
import heapq
import itertools
import json
import os
import re
import shutil
import tempfile
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import dataset as dsops
from . import sendstream
from .metrics import LOAD_WINDOWS, MetricsBundle, export_csv, load_average_update, record, \
    render_svg
from .pool import PoolError, create_pool
from .vdev import create_device

SEGMENT_BYTES = 64 * 1024
SAMPLE_MS = 1000
DEFAULT_DISK_BANDWIDTH = 200 * 1024 * 1024


class ScenarioError(ValueError):
    """Malformed scenario configuration."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class ScenarioFailed(RuntimeError):
    """The end-of-run consistency check found target and source disagreeing."""

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


@dataclass
class NodeSpec:
    name: str
    children: int = 4
    capacity_bytes: int = 64 * 1024 * 1024  # per child device
    sector_size: int = 512
    disk_bandwidth: int = DEFAULT_DISK_BANDWIDTH


@dataclass
class LinkSpec:
    src: str
    dst: str
    bandwidth: int  # bytes per second
    latency_ms: int = 0
    loss_prob: float = 0.0

    @property
    def name(self) -> str:
        return f"{self.src}->{self.dst}"


@dataclass
class WorkloadOp:
    at_ms: int
    object_id: int
    offset: int
    length: int
    content: str = "random"
    index: int = 0


@dataclass
class ReplicationPolicy:
    source: str
    target: str
    interval_s: float = 10.0
    mode: str = "discrete"
    dedup: bool = False

    @property
    def interval_ms(self) -> int:
        return int(round(self.interval_s * 1000))


@dataclass
class Scenario:
    nodes: list
    links: list
    workload: list
    policy: ReplicationPolicy
    seed: int = 0
    duration_s: float = 300.0
    dataset: str = "data"
    record_size: int = 128 * 1024
    corrupt_ticks: frozenset = frozenset()

    @property
    def duration_ms(self) -> int:
        return int(round(self.duration_s * 1000))

    def node(self, name: str) -> NodeSpec:
        return next(n for n in self.nodes if n.name == name)

    def link_between(self, src: str, dst: str) -> LinkSpec:
        for link in self.links:
            if (link.src, link.dst) in ((src, dst), (dst, src)):
                return link
        raise KeyError(f"no link between {src} and {dst}")


# ------------------------------------------------------------------ config


_SIZE_UNITS = {"": 1, "b": 1, "k": 1024, "kb": 1000, "kib": 1024, "m": 1024 ** 2, "mb": 1000 ** 2,
               "mib": 1024 ** 2, "g": 1024 ** 3, "gb": 1000 ** 3, "gib": 1024 ** 3}
_SIZE_RE = re.compile(r"^\s*(\d+(?:\.\d+)?)\s*([a-zA-Z]*)\s*$")


def parse_size(text: str, line: int | None = None) -> int:
    m = _SIZE_RE.match(text)
    if not m or m.group(2).lower() not in _SIZE_UNITS:
        raise ScenarioError(f"bad size {text!r}", line)
    return int(float(m.group(1)) * _SIZE_UNITS[m.group(2).lower()])


def _num(text: str, line: int, kind=float):
    try:
        return kind(text)
    except ValueError:
        raise ScenarioError(f"bad number {text!r}", line) from None


def _bool(text: str, line: int) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ScenarioError(f"bad boolean {text!r}", line)


_SECTION_KEYS = {
    "scenario": {"seed", "duration", "dataset", "record_size"},
    "node": {"children", "capacity", "sector_size", "disk_bandwidth"},
    "link": {"bandwidth", "latency_ms", "loss"},
    "workload": {"write", "every"},
    "policy": {"source", "target", "interval", "mode", "dedup"},
    "faults": {"corrupt_stream"},
}
_REPEATABLE = {"write", "every"}


def _tokenize(text: str):
    """``[(kind, args, line, [(key, value, line)])]`` from INI-style text."""
    sections = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ScenarioError("unterminated section header", lineno)
            words = line[1:-1].split()
            if not words:
                raise ScenarioError("empty section header", lineno)
            if words[0] not in _SECTION_KEYS:
                raise ScenarioError(f"unknown section [{words[0]}]", lineno)
            sections.append((words[0], words[1:], lineno, []))
            continue
        if "=" not in line:
            raise ScenarioError(f"expected key = value, got {line!r}", lineno)
        if not sections:
            raise ScenarioError("key outside any section", lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        kind, _, _, entries = sections[-1]
        if key not in _SECTION_KEYS[kind]:
            raise ScenarioError(f"unknown key {key!r} in [{kind}]", lineno)
        if key not in _REPEATABLE and any(k == key for k, _, _ in entries):
            raise ScenarioError(f"duplicate key {key!r}", lineno)
        entries.append((key, value, lineno))
    return sections


def _content_token(tok: str, line: int) -> str:
    if tok in ("random", "zero") or re.fullmatch(r"(seed|byte):\d+", tok):
        if tok.startswith("byte:") and int(tok[5:]) > 255:
            raise ScenarioError("byte value above 255", line)
        return tok
    raise ScenarioError(f"bad content {tok!r} (random, zero, seed:N, byte:N)", line)


def parse_scenario(text: str) -> Scenario:
    sections = _tokenize(text)
    eof = len(text.splitlines()) + 1
    seen_singletons = {}
    nodes, links, workload_entries, corrupt = [], [], [], set()
    policy_entries = None
    scen = {"seed": 0, "duration": 300.0, "dataset": "data", "record_size": 128 * 1024}
    for kind, args, lineno, entries in sections:
        if kind in ("scenario", "workload", "policy", "faults"):
            if args:
                raise ScenarioError(f"[{kind}] takes no arguments", lineno)
            if kind in seen_singletons:
                raise ScenarioError(f"duplicate section [{kind}]", lineno)
            seen_singletons[kind] = lineno
        if kind == "scenario":
            for key, value, ln in entries:
                if key == "seed":
                    scen["seed"] = _num(value, ln, int)
                    if not 0 <= scen["seed"] < 2 ** 64:
                        raise ScenarioError("seed must be an unsigned 64-bit integer", ln)
                elif key == "duration":
                    scen["duration"] = _num(value, ln)
                    if scen["duration"] <= 0:
                        raise ScenarioError("duration must be positive", ln)
                elif key == "dataset":
                    scen["dataset"] = value
                else:
                    scen["record_size"] = parse_size(value, ln)
        elif kind == "node":
            if len(args) != 1:
                raise ScenarioError("[node <name>] takes one name", lineno)
            if any(n.name == args[0] for n in nodes):
                raise ScenarioError(f"duplicate node {args[0]!r}", lineno)
            node = NodeSpec(args[0])
            for key, value, ln in entries:
                if key == "children":
                    node.children = _num(value, ln, int)
                    if not 2 <= node.children <= 16:
                        raise ScenarioError("children must be in [2, 16]", ln)
                elif key == "capacity":
                    node.capacity_bytes = parse_size(value, ln)
                elif key == "sector_size":
                    node.sector_size = parse_size(value, ln)
                else:
                    node.disk_bandwidth = parse_size(value, ln)
                    if node.disk_bandwidth <= 0:
                        raise ScenarioError("disk_bandwidth must be positive", ln)
            nodes.append(node)
        elif kind == "link":
            if len(args) != 2:
                raise ScenarioError("[link <src> <dst>] takes two node names", lineno)
            link = LinkSpec(args[0], args[1], 0)
            have_bw = False
            for key, value, ln in entries:
                if key == "bandwidth":
                    link.bandwidth = parse_size(value, ln)
                    if link.bandwidth <= 0:
                        raise ScenarioError("bandwidth must be positive", ln)
                    have_bw = True
                elif key == "latency_ms":
                    link.latency_ms = _num(value, ln, int)
                    if link.latency_ms < 0:
                        raise ScenarioError("latency_ms must be non-negative", ln)
                else:
                    link.loss_prob = _num(value, ln)
                    if not 0.0 <= link.loss_prob < 1.0:
                        raise ScenarioError("loss must be in [0, 1)", ln)
            if not have_bw:
                raise ScenarioError("link needs a bandwidth", lineno)
            links.append((link, lineno))
        elif kind == "workload":
            workload_entries.extend(entries)
        elif kind == "policy":
            policy_entries = (lineno, entries)
        else:
            for key, value, ln in entries:
                for tok in value.replace(",", " ").split():
                    corrupt.add(_num(tok, ln, int))
    names = {n.name for n in nodes}
    for link, ln in links:
        for end in (link.src, link.dst):
            if end not in names:
                raise ScenarioError(f"link endpoint {end!r} is not a node", ln)
    if policy_entries is None:
        raise ScenarioError("missing [policy] section", eof)
    plineno, pentries = policy_entries
    pvals = {k: (v, ln) for k, v, ln in pentries}
    for req in ("source", "target"):
        if req not in pvals:
            raise ScenarioError(f"[policy] needs {req}", plineno)
        if pvals[req][0] not in names:
            raise ScenarioError(f"policy {req} {pvals[req][0]!r} is not a node", pvals[req][1])
    policy = ReplicationPolicy(pvals["source"][0], pvals["target"][0])
    if policy.source == policy.target:
        raise ScenarioError("policy source and target must differ", plineno)
    if "interval" in pvals:
        policy.interval_s = _num(*pvals["interval"])
        if policy.interval_s <= 0:
            raise ScenarioError("interval must be positive", pvals["interval"][1])
    if "mode" in pvals:
        policy.mode = pvals["mode"][0]
        if policy.mode not in ("discrete", "cumulative"):
            raise ScenarioError("mode must be discrete or cumulative", pvals["mode"][1])
    if "dedup" in pvals:
        policy.dedup = _bool(*pvals["dedup"])
    link_objs = [link for link, _ in links]
    if not any({l.src, l.dst} == {policy.source, policy.target} for l in link_objs):
        raise ScenarioError(f"no [link] joins {policy.source} and {policy.target}", plineno)
    duration_ms = int(round(scen["duration"] * 1000))
    workload = _expand_workload(workload_entries, duration_ms)
    return Scenario(nodes, link_objs, workload, policy, scen["seed"], scen["duration"],
                    scen["dataset"], scen["record_size"], frozenset(corrupt))


def _expand_workload(entries, duration_ms: int) -> list:
    ops = []
    for key, value, ln in entries:
        words = value.split()
        if key == "write":
            if len(words) not in (4, 5):
                raise ScenarioError("write = <at_s> <object> <offset> <length> [content]", ln)
            at = int(round(_num(words[0], ln) * 1000))
            content = _content_token(words[4], ln) if len(words) == 5 else "random"
            ops.append(WorkloadOp(at, _num(words[1], ln, int), parse_size(words[2], ln),
                                  parse_size(words[3], ln), content))
        else:
            extra = [w for w in words[3:] if w.startswith("wrap=")]
            rest = [w for w in words[3:] if not w.startswith("wrap=")]
            if len(words) < 3 or len(rest) > 1 or len(extra) > 1:
                raise ScenarioError(
                    "every = <period_s> <object> <length> [content] [wrap=<size>]", ln)
            period = int(round(_num(words[0], ln) * 1000))
            if period <= 0:
                raise ScenarioError("period must be positive", ln)
            oid, length = _num(words[1], ln, int), parse_size(words[2], ln)
            content = _content_token(rest[0], ln) if rest else "random"
            wrap = parse_size(extra[0][5:], ln) if extra else 0
            if wrap and wrap < length:
                raise ScenarioError("wrap must be at least the write length", ln)
            k = 1
            while k * period < duration_ms:
                off = (k - 1) * length
                if wrap:
                    off %= (wrap // length) * length
                ops.append(WorkloadOp(k * period, oid, off, length, content))
                k += 1
    for op in ops:
        if op.length <= 0 or op.object_id < 0:
            raise ScenarioError("workload writes need a positive length and object id >= 0")
    ops.sort(key=lambda op: op.at_ms)
    for i, op in enumerate(ops):
        op.index = i
    return ops


def load_scenario(path: str) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(fh.read())


def bundled_scenarios() -> list:
    root = resources.files("poolforge") / "scenarios"
    return sorted(p.name for p in root.iterdir() if p.name.endswith(".cfg"))


def bundled_scenario_text(name: str) -> str:
    if not name.endswith(".cfg"):
        name += ".cfg"
    return (resources.files("poolforge") / "scenarios" / name).read_text(encoding="utf-8")


def resolve_scenario(ref: str) -> Scenario:
    """A path to a config file, or the name of a bundled scenario."""
    if os.path.exists(ref):
        return load_scenario(ref)
    try:
        text = bundled_scenario_text(os.path.basename(ref))
    except FileNotFoundError:
        raise ScenarioError(f"no scenario file or bundled scenario {ref!r}") from None
    return parse_scenario(text)


# ------------------------------------------------------------------ randomness


def _u64(label: str) -> int:
    return int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")


def derived_rng(seed: int, label: str) -> np.random.Generator:
    """Counter-based stream keyed by (seed, label); labels never perturb each other."""
    return np.random.Generator(np.random.Philox(key=np.array([seed, _u64(label)],
                                                             dtype=np.uint64)))


def workload_bytes(seed: int, op: WorkloadOp) -> bytes:
    kind, _, arg = op.content.partition(":")
    if kind == "zero":
        return bytes(op.length)
    if kind == "byte":
        return bytes([int(arg)]) * op.length
    if kind == "seed":
        return derived_rng(int(arg), "content").bytes(op.length)
    return derived_rng(seed, f"write:{op.index}").bytes(op.length)


# ------------------------------------------------------------------ link model


@dataclass
class TransferResult:
    completion_ms: int
    wire_bytes: int
    retries: int


def _ms_for(nbytes: int, rate: int) -> int:
    return -(-nbytes * 1000 // rate)


def link_transfer(link: LinkSpec, nbytes: int, start_ms: int,
                  rng: np.random.Generator) -> TransferResult:
    """Latency plus serialization, with lost 64 KiB segments resent.

    Each retry costs another latency plus that segment's serialization time.
    """
    if nbytes <= 0:
        raise ValueError("transfer size must be positive")
    nseg = -(-nbytes // SEGMENT_BYTES)
    sizes = np.full(nseg, SEGMENT_BYTES, dtype=np.int64)
    sizes[-1] = nbytes - (nseg - 1) * SEGMENT_BYTES
    if link.loss_prob > 0:
        losses = rng.geometric(1.0 - link.loss_prob, size=nseg) - 1
    else:
        losses = np.zeros(nseg, dtype=np.int64)
    elapsed = link.latency_ms + _ms_for(nbytes, link.bandwidth)
    wire = nbytes
    for size, lost in zip(sizes.tolist(), losses.tolist()):
        if lost:
            elapsed += lost * (link.latency_ms + _ms_for(size, link.bandwidth))
            wire += lost * size
    return TransferResult(start_ms + elapsed, wire, int(losses.sum()))


# ------------------------------------------------------------------ engine


@dataclass
class TickReport:
    index: int
    time_ms: int
    snapshot: str
    base: str | None
    stream_bytes: int = 0
    deduped_bytes: int = 0
    wire_bytes: int = 0
    completion_ms: int | None = None
    lag_ms: int | None = None
    ok: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class _Service:
    issue: int
    start: int
    end: int
    node: str
    kind: str


@dataclass
class _Transfer:
    start: int
    end: int
    wire_bytes: int
    stream_bytes: int


@dataclass
class SimResult:
    scenario: Scenario
    ticks: list
    skipped_ticks: int
    metrics: MetricsBundle
    events: list
    nodes: dict
    consistent: bool
    converged: bool
    link_wire_bytes: int
    link_stream_bytes: int
    capacity: dict = field(default_factory=dict)

    @property
    def completed_ticks(self) -> list:
        return [t for t in self.ticks if t.ok]

    def event_log(self) -> str:
        return "\n".join(self.events) + "\n"

    def summary(self) -> dict:
        return {
            "seed": self.scenario.seed,
            "duration_s": self.scenario.duration_s,
            "ticks": len(self.ticks),
            "ticks_ok": len(self.completed_ticks),
            "ticks_skipped": self.skipped_ticks,
            "consistent": self.consistent,
            "converged": self.converged,
            "link_wire_bytes": self.link_wire_bytes,
            "link_stream_bytes": self.link_stream_bytes,
            "nodes": self.nodes,
            "tick_reports": [t.to_dict() for t in self.ticks],
        }


class Simulation:
    def __init__(self, scenario: Scenario, workdir: str):
        self.sc = scenario
        self.workdir = workdir
        self.now = 0
        self._seq = itertools.count()
        self.queue = []
        self.events = []
        self.services = []
        self.transfers = []
        self.ticks = []
        self.skipped = 0
        self.busy_until = 0
        self.received = []  # (receive done ms, snapshot time ms)
        self.origin = None
        self.pools = {n.name: self._make_pool(n) for n in scenario.nodes}
        self.disk_free = {n.name: 0 for n in scenario.nodes}
        self.link = scenario.link_between(scenario.policy.source, scenario.policy.target)
        self.link_rng = derived_rng(scenario.seed, f"link:{self.link.name}")
        self.fault_rng = derived_rng(scenario.seed, "faults")
        self.source_ds = dsops.create_dataset(self.pools[scenario.policy.source],
                                              scenario.dataset, scenario.record_size)
        self.metrics = MetricsBundle()
        self._loads = {name: 0.0 for name in LOAD_WINDOWS}
        self._space_cache = {}

    def _make_pool(self, spec: NodeSpec):
        root = os.path.join(self.workdir, spec.name)
        os.makedirs(root, exist_ok=True)
        cap = spec.capacity_bytes // spec.sector_size
        devs = []
        for i in range(spec.children):
            guid = hashlib.sha256(f"{self.sc.seed}:{spec.name}:{i}".encode()).digest()[:16]
            devs.append(create_device(os.path.join(root, f"dev{i}"), cap, spec.sector_size, guid))
        guid = hashlib.sha256(f"{self.sc.seed}:{spec.name}".encode()).digest()[:16]
        return create_pool(devs, spec.name, guid=guid, clock=lambda: self.now)

    # ----------------------------------------------------------- plumbing

    def push(self, time_ms: int, kind: str, payload=None) -> None:
        heapq.heappush(self.queue, (time_ms, next(self._seq), kind, payload))

    def log(self, event: str, **fields) -> None:
        body = " ".join(f"{k}={fields[k]}" for k in fields)
        self.events.append(f"{self.now} {event} {body}".rstrip())

    def _disk(self, node: str, nbytes: int, kind: str) -> int:
        bw = self.sc.node(node).disk_bandwidth
        start = max(self.now, self.disk_free[node])
        end = start + _ms_for(nbytes, bw)
        self.disk_free[node] = end
        self.services.append(_Service(self.now, start, end, node, kind))
        return end

    # ----------------------------------------------------------- events

    def on_write(self, op: WorkloadOp) -> None:
        pool = self.pools[self.sc.policy.source]
        data = workload_bytes(self.sc.seed, op)
        dsops.write_file(self.source_ds, op.object_id, op.offset, data)
        pool.commit_txg()
        done = self._disk(self.sc.policy.source, len(data), "write")
        self.log("write", object=op.object_id, offset=op.offset, length=op.length,
                 txg=pool.txg, done=done)

    def _common_base(self, target_pool):
        for snap in reversed(self.source_ds.snapshots[:-1]):
            if target_pool.catalog.snapshot_by_guid(snap.guid) is not None:
                return snap
        return None

    def replication_tick(self, _payload=None) -> None:
        if self.now < self.busy_until:
            self.skipped += 1
            self.log("tick-skipped", busy_until=self.busy_until)
            return
        pol = self.sc.policy
        src, dst = self.pools[pol.source], self.pools[pol.target]
        index = len(self.ticks) + 1
        snap = dsops.snapshot(self.source_ds, f"tick-{index:04d}")
        if pol.mode == "cumulative" and self.origin is not None:
            base = self.origin
        else:
            base = self._common_base(dst)
        if base is None:
            stream = sendstream.send_full(src, snap)
        else:
            stream = sendstream.send_incremental(src, base, snap)
        raw_len = len(stream)
        if pol.dedup:
            stream = sendstream.dedup_stream(stream, sendstream.held_checksums(dst))
        report = TickReport(index, self.now, snap.full_name, base.full_name if base else None,
                            len(stream), raw_len - len(stream))
        self.ticks.append(report)
        if index in self.sc.corrupt_ticks:
            buf = bytearray(stream)
            buf[int(self.fault_rng.integers(len(buf)))] ^= 0xFF
            stream = bytes(buf)
            self.log("fault", tick=index, kind="corrupt-stream")
        sent = self._disk(pol.source, len(stream), "send")
        xfer = link_transfer(self.link, len(stream), sent, self.link_rng)
        report.wire_bytes = xfer.wire_bytes
        self.transfers.append(_Transfer(sent, xfer.completion_ms, xfer.wire_bytes, len(stream)))
        self.services.append(_Service(self.now, sent, xfer.completion_ms, "link", "transfer"))
        self.busy_until = float("inf")
        self.log("tick", index=index, snapshot=snap.full_name, guid=snap.guid.hex(),
                 base=base.full_name if base else "-", stream_bytes=len(stream),
                 deduped_bytes=report.deduped_bytes, wire_bytes=xfer.wire_bytes,
                 retries=xfer.retries, arrives=xfer.completion_ms)
        self.push(xfer.completion_ms, "transfer-complete", (report, snap, stream))

    def on_transfer_complete(self, payload) -> None:
        report, snap, stream = payload
        dst = self.pools[self.sc.policy.target]
        try:
            got = sendstream.receive(dst, stream, target_name=self.sc.dataset,
                                     force=self.sc.policy.mode == "cumulative")
        except (sendstream.SendError, dsops.DatasetError, PoolError) as exc:
            report.error = f"{type(exc).__name__}: {exc}"
            self.busy_until = self.now
            self.log("receive-failed", tick=report.index, error=type(exc).__name__)
            return
        done = self._disk(self.sc.policy.target, len(stream), "receive")
        report.ok = True
        report.completion_ms = done
        report.lag_ms = done - report.time_ms
        self.busy_until = done
        self.received.append((done, report.time_ms))
        if self.origin is None:
            self.origin = snap
        self.log("receive", tick=report.index, snapshot=got.full_name, txg=dst.txg,
                 done=done, lag_ms=report.lag_ms)

    # ----------------------------------------------------------- sampling

    def _space(self, name: str, pool):
        key = (name, pool.txg)
        if key not in self._space_cache:
            used = sum(dsops.space_report(d)["used_bytes"] for d in pool.catalog.datasets.values())
            self._space_cache = {k: v for k, v in self._space_cache.items() if k[0] != name}
            self._space_cache[key] = (used, pool.free_bytes(), dsops.metadata_bytes(pool))
        return self._space_cache[key]

    @staticmethod
    def _overlap(a0, a1, b0, b1) -> int:
        return max(0, min(a1, b1) - max(a0, b0))

    @staticmethod
    def _union_busy(intervals, w0, w1) -> int:
        spans = sorted((max(s, w0), min(e, w1)) for s, e in intervals if e > w0 and s < w1)
        busy, cur_s, cur_e = 0, None, None
        for s, e in spans:
            if cur_e is None or s > cur_e:
                if cur_e is not None:
                    busy += cur_e - cur_s
                cur_s, cur_e = s, e
            else:
                cur_e = max(cur_e, e)
        if cur_e is not None:
            busy += cur_e - cur_s
        return busy

    @staticmethod
    def _share(total: int, start: int, end: int, w0: int, w1: int) -> int:
        """Integer bytes of a uniformly spread transfer falling in ``[w0, w1)``."""
        span = end - start
        lo = min(max(w0, start), end) - start
        hi = min(max(w1, start), end) - start
        return total * hi // span - total * lo // span

    def sample(self, t_ms: int) -> None:
        w0, w1 = t_ms - SAMPLE_MS, t_ms
        t = t_ms / 1000.0
        m = self.metrics
        disks = [s for s in self.services if s.node != "link"]
        engine = self._union_busy([(s.start, s.end) for s in disks], w0, w1)
        record(m, "engine_busy_fraction", t, engine / SAMPLE_MS)
        running = sum(1 for s in self.services if self._overlap(s.start, s.end, w0, w1))
        waiting = sum(1 for s in self.services if self._overlap(s.issue, s.start, w0, w1))
        for name, window in LOAD_WINDOWS.items():
            self._loads[name] = load_average_update(self._loads[name], running + waiting, window)
            record(m, name, t, self._loads[name])
        for node in self.sc.nodes:
            mine = [(s.start, s.end) for s in disks if s.node == node.name]
            record(m, f"disk_busy_fraction:{node.name}", t,
                   self._union_busy(mine, w0, w1) / SAMPLE_MS)
        record(m, "cache_bytes", t, sum(p.cache.bytes for p in self.pools.values()))
        record(m, "cache_evicted_bytes", t, sum(p.cache.evicted_bytes for p in self.pools.values()))
        out = sum(self._share(x.wire_bytes, x.start, x.end, w0, w1) for x in self.transfers)
        inb = sum(self._share(x.stream_bytes, x.start, x.end, w0, w1) for x in self.transfers)
        record(m, "link_bytes_per_s_out", t, out)
        record(m, "link_bytes_per_s_in", t, inb)
        for node in self.sc.nodes:
            used, avail, meta = self._space(node.name, self.pools[node.name])
            record(m, f"dataset_used_bytes:{node.name}", t, used)
            record(m, f"pool_available_bytes:{node.name}", t, avail)
            record(m, f"metadata_bytes:{node.name}", t, meta)
        record(m, "inflight_ops_running", t, running)
        record(m, "inflight_ops_waiting", t, waiting)
        record(m, "uptime_s", t, t)
        newest = max((snap_t for done, snap_t in self.received if done <= t_ms), default=0)
        record(m, "replication_lag_s", t, (t_ms - newest) / 1000.0)
        self.services = [s for s in self.services if s.end > w1]
        self.transfers = [x for x in self.transfers if x.end > w1]

    # ----------------------------------------------------------- run

    def run(self) -> SimResult:
        sc = self.sc
        for op in sc.workload:
            self.push(op.at_ms, "write", op)
        t = 0
        while t < sc.duration_ms:
            self.push(t, "tick")
            t += sc.policy.interval_ms
        handlers = {"write": self.on_write, "tick": self.replication_tick,
                    "transfer-complete": self.on_transfer_complete}
        next_sample = SAMPLE_MS
        while self.queue:
            when, _, kind, payload = heapq.heappop(self.queue)
            while next_sample <= when:
                self.sample(next_sample)
                next_sample += SAMPLE_MS
            self.now = when
            handlers[kind](payload)
        horizon = max([sc.duration_ms] + [s.end for s in self.services]
                      + [x.end for x in self.transfers])
        while next_sample <= -(-horizon // SAMPLE_MS) * SAMPLE_MS:
            self.sample(next_sample)
            next_sample += SAMPLE_MS
        self.now = horizon
        wire_total = sum(t.wire_bytes for t in self.ticks)
        stream_total = sum(t.stream_bytes for t in self.ticks)
        return self._finish(wire_total, stream_total)

    def _finish(self, wire_total: int, stream_total: int) -> SimResult:
        pol = self.sc.policy
        src, dst = self.pools[pol.source], self.pools[pol.target]
        consistent, converged = True, False
        target_ds = dst.catalog.datasets.get(self.sc.dataset)
        if target_ds is not None and target_ds.snapshots:
            latest = target_ds.snapshots[-1]
            found = src.catalog.snapshot_by_guid(latest.guid)
            consistent = found is not None and (
                dsops.content_hash(latest, dst) == dsops.content_hash(found[1], src))
            converged = consistent and found[1] is self.source_ds.snapshots[-1]
        nodes = {}
        for name, pool in self.pools.items():
            pool.check_space()
            nodes[name] = {
                "txg": pool.txg,
                "datasets": {d.name: {"snapshots": [s.name for s in d.snapshots],
                                      "head_hash": dsops.content_hash(d),
                                      "latest_snapshot_hash": dsops.content_hash(
                                          d.snapshots[-1], pool) if d.snapshots else None}
                             for d in pool.catalog.datasets.values()},
            }
        self.log("consistency-check", consistent=consistent, converged=converged)
        capacity = {name: p.data_capacity_bytes for name, p in self.pools.items()}
        return SimResult(self.sc, self.ticks, self.skipped, self.metrics, self.events, nodes,
                         consistent, converged, wire_total, stream_total, capacity)

    def close(self) -> None:
        for pool in self.pools.values():
            pool.close()


def run_scenario(scenario: Scenario, workdir: str | None = None,
                 check: bool = True) -> SimResult:
    """Run to completion; raises ScenarioFailed if the consistency check fails."""
    own = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix="poolforge-sim-")
    sim = Simulation(scenario, workdir)
    try:
        result = sim.run()
    finally:
        sim.close()
        if own:
            shutil.rmtree(workdir, ignore_errors=True)
    if check and not result.consistent:
        raise ScenarioFailed("target's latest snapshot differs from the source", result)
    return result


def write_outputs(result: SimResult, outdir: str) -> dict:
    """Metrics CSVs, an SVG per figure group, the event log and a JSON summary."""
    os.makedirs(outdir, exist_ok=True)
    paths = {"series": export_csv(result.metrics, os.path.join(outdir, "series")),
             "wide_csv": export_csv(result.metrics, os.path.join(outdir, "metrics.csv"),
                                    wide=True)[0]}
    names = result.metrics.names()
    groups = {
        "engine": ["engine_busy_fraction"] + [n for n in names if n.startswith("disk_busy")],
        "load": ["load_1m", "load_5m", "load_15m"],
        "traffic": ["link_bytes_per_s_out", "link_bytes_per_s_in"],
        "space": [n for n in names if n.split(":")[0] in ("dataset_used_bytes",
                                                         "pool_available_bytes")],
        "lag": ["replication_lag_s"],
    }
    svgs = []
    for group, series in groups.items():
        series = [s for s in series if s in result.metrics.series]
        if series:
            path = os.path.join(outdir, f"{group}.svg")
            render_svg(result.metrics, series, path)
            svgs.append(path)
    paths["svg"] = svgs
    paths["events"] = os.path.join(outdir, "events.log")
    with open(paths["events"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.event_log())
    paths["summary"] = os.path.join(outdir, "summary.json")
    with open(paths["summary"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(result.summary(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    paths["bundle"] = os.path.join(outdir, "metrics.json")
    with open(paths["bundle"], "w", encoding="utf-8", newline="\n") as fh:
        fh.write(result.metrics.to_json())
    return paths
