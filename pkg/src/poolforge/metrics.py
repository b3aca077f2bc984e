"""Time series sampled by the simulator, with CSV and SVG export.

Series names are a kind, optionally followed by ``:<node>`` for per-node
series (``disk_busy_fraction:local``). Timestamps are virtual seconds.
"""

import json
import math
import os
from dataclasses import dataclass, field

# kind -> (unit, flags)
SERIES_KINDS = {
    "engine_busy_fraction": ("fraction", "fraction"),
    "load_1m": ("ops", ""),
    "load_5m": ("ops", ""),
    "load_15m": ("ops", ""),
    "disk_busy_fraction": ("fraction", "fraction"),
    "cache_bytes": ("bytes", ""),
    "cache_evicted_bytes": ("bytes", "cumulative"),
    "link_bytes_per_s_out": ("bytes/s", ""),
    "link_bytes_per_s_in": ("bytes/s", ""),
    "dataset_used_bytes": ("bytes", ""),
    "pool_available_bytes": ("bytes", ""),
    "metadata_bytes": ("bytes", ""),
    "inflight_ops_running": ("ops", ""),
    "inflight_ops_waiting": ("ops", ""),
    "uptime_s": ("s", "cumulative"),
    "replication_lag_s": ("s", ""),
}

LOAD_WINDOWS = {"load_1m": 1, "load_5m": 5, "load_15m": 15}


class MetricsError(ValueError):
    pass


def series_kind(name: str) -> str:
    return name.split(":", 1)[0]


def series_unit(name: str) -> str:
    kind = series_kind(name)
    if kind not in SERIES_KINDS:
        raise MetricsError(f"unknown series {name!r}")
    return SERIES_KINDS[kind][0]


@dataclass
class MetricsBundle:
    series: dict = field(default_factory=dict)

    def names(self) -> list:
        return list(self.series)

    def samples(self, name: str) -> list:
        return self.series[name]

    def values(self, name: str) -> list:
        return [v for _, v in self.series[name]]

    def to_json(self) -> str:
        return json.dumps({"series": {k: [[t, v] for t, v in s]
                                      for k, s in self.series.items()}},
                          sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "MetricsBundle":
        raw = json.loads(text)
        return cls({k: [(t, v) for t, v in s] for k, s in raw["series"].items()})


def record(bundle: MetricsBundle, series: str, t: float, value: float) -> None:
    kind = series_kind(series)
    if kind not in SERIES_KINDS:
        raise MetricsError(f"unknown series {series!r}")
    _, flags = SERIES_KINDS[kind]
    if not math.isfinite(value):
        raise MetricsError(f"{series}: non-finite value {value!r}")
    if flags == "fraction" and not 0.0 <= value <= 1.0:
        raise MetricsError(f"{series}: fraction {value} outside [0, 1]")
    samples = bundle.series.setdefault(series, [])
    if samples:
        last_t, last_v = samples[-1]
        if t <= last_t:
            raise MetricsError(f"{series}: time {t} does not follow {last_t}")
        if flags == "cumulative" and value < last_v:
            raise MetricsError(f"{series}: cumulative series decreased")
    samples.append((t, value))


def load_average_update(prev: float, q_now: float, window_minutes: float) -> float:
    """One 1-second step of the exponentially damped load average."""
    alpha = math.exp(-1.0 / (60.0 * window_minutes))
    return prev * alpha + q_now * (1.0 - alpha)


def _fmt(v) -> str:
    v = float(v)
    if v.is_integer() and abs(v) < 2 ** 53:
        return str(int(v))
    return repr(v)


def csv_filename(series: str) -> str:
    return series.replace(":", "__") + ".csv"


def export_csv(bundle: MetricsBundle, path: str, wide: bool = False) -> list:
    """Write CSV files; returns the paths written.

    ``wide`` writes one ``path`` (a file) with a column per series; otherwise
    ``path`` is a directory receiving one ``t,<series>`` file per series.
    """
    if wide:
        names = bundle.names()
        times = sorted({t for s in bundle.series.values() for t, _ in s})
        cols = [dict(bundle.series[n]) for n in names]
        lines = [",".join(["t"] + names)]
        for t in times:
            lines.append(",".join([_fmt(t)] + [_fmt(c[t]) if t in c else "" for c in cols]))
        _write(path, "\n".join(lines) + "\n")
        return [path]
    os.makedirs(path, exist_ok=True)
    written = []
    for name in bundle.names():
        lines = [f"t,{name}"] + [f"{_fmt(t)},{_fmt(v)}" for t, v in bundle.series[name]]
        out = os.path.join(path, csv_filename(name))
        _write(out, "\n".join(lines) + "\n")
        written.append(out)
    return written


def _write(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
            "#7f7f7f"]


def render_svg(bundle: MetricsBundle, series: list, path: str | None = None,
               width: int = 800, height: int = 400) -> str:
    """Standalone SVG line chart with one polyline per series."""
    if not series:
        raise MetricsError("no series to plot")
    for name in series:
        if name not in bundle.series:
            raise MetricsError(f"unknown series {name!r}")
    left, right, top, bottom = 70, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom
    pts = [p for name in series for p in bundle.series[name]]
    t0 = min((t for t, _ in pts), default=0.0)
    t1 = max((t for t, _ in pts), default=1.0)
    vmax = max((v for _, v in pts), default=1.0)
    vmin = min(0.0, min((v for _, v in pts), default=0.0))
    tspan = (t1 - t0) or 1.0
    vspan = (vmax - vmin) or 1.0

    def xy(t, v):
        return left + (t - t0) / tspan * pw, top + ph - (v - vmin) / vspan * ph

    units = sorted({series_unit(n) for n in series})
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="#000000"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="#000000"/>',
        f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12">t (s)</text>',
        f'<text x="16" y="{top + ph / 2:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="12" transform="rotate(-90 16 {top + ph / 2:.1f})">'
        f'{_escape(", ".join(units))}</text>',
    ]
    for frac in (0.0, 0.5, 1.0):
        v = vmin + frac * vspan
        _, y = xy(t0, v)
        out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="10">{_escape(_fmt(round(v, 3)))}</text>')
        t = t0 + frac * tspan
        x, _ = xy(t, vmin)
        out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="10">{_escape(_fmt(round(t, 3)))}</text>')
    for i, name in enumerate(series):
        colour = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in (xy(t, v) for t, v in bundle.series[name]))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                   f'data-series="{_escape(name)}" points="{coords}"/>')
        out.append(f'<text x="{left + 8}" y="{top + 14 * (i + 1)}" fill="{colour}" '
                   f'font-family="sans-serif" font-size="11">{_escape(name)}</text>')
    out.append("</svg>")
    text = "\n".join(out) + "\n"
    if path is not None:
        _write(path, text)
    return text


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
