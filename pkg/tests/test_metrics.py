import math
import os

import pytest

from poolforge.metrics import (SERIES_KINDS, MetricsBundle, MetricsError, csv_filename,
                               export_csv, load_average_update, record, render_svg,
                               series_unit)


def test_record_guards():
    b = MetricsBundle()
    record(b, "uptime_s", 1.0, 1.0)
    record(b, "uptime_s", 2.0, 2.0)
    with pytest.raises(MetricsError):
        record(b, "uptime_s", 2.0, 3.0)
    with pytest.raises(MetricsError):
        record(b, "uptime_s", 3.0, 1.0)  # cumulative went down
    with pytest.raises(MetricsError):
        record(b, "engine_busy_fraction", 1.0, 1.5)
    with pytest.raises(MetricsError):
        record(b, "cpu", 1.0, 0.0)
    with pytest.raises(MetricsError):
        record(b, "cache_bytes", 1.0, math.nan)
    assert series_unit("disk_busy_fraction:local") == "fraction"
    assert set(SERIES_KINDS) >= {"load_1m", "load_5m", "load_15m", "inflight_ops_waiting"}


def test_load_average():
    assert load_average_update(2.0, 2.0, 1) == pytest.approx(2.0, abs=0, rel=1e-15)
    v = 0.0
    for _ in range(60):
        v = load_average_update(v, 1.0, 1)
    assert v == pytest.approx(1 - math.exp(-1), rel=1e-12)
    prev = 5.0
    for _ in range(100):
        nxt = load_average_update(prev, 0.0, 5)
        assert 0 < nxt < prev
        prev = nxt


def _bundle():
    b = MetricsBundle()
    for t in range(1, 6):
        record(b, "cache_bytes", float(t), t * 1000)
        record(b, "engine_busy_fraction", float(t), t / 10)
    record(b, "load_1m", 2.0, 0.25)
    return b


def test_csv_export(tmp_path):
    b = _bundle()
    paths = export_csv(b, str(tmp_path / "series"))
    assert [os.path.basename(p) for p in paths] == ["cache_bytes.csv", "engine_busy_fraction.csv",
                                                   "load_1m.csv"]
    text = open(paths[0]).read()
    assert text.splitlines()[0] == "t,cache_bytes" and text.splitlines()[2] == "2,2000"
    assert open(paths[1]).read().splitlines()[1] == "1,0.1"
    again = export_csv(b, str(tmp_path / "again"))
    assert [open(p, "rb").read() for p in paths] == [open(p, "rb").read() for p in again]
    wide = export_csv(b, str(tmp_path / "wide.csv"), wide=True)[0]
    rows = open(wide).read().splitlines()
    assert rows[0] == "t,cache_bytes,engine_busy_fraction,load_1m"
    assert rows[1] == "1,1000,0.1," and rows[2] == "2,2000,0.2,0.25" and len(rows) == 6
    empty = export_csv(MetricsBundle(), str(tmp_path / "e.csv"), wide=True)[0]
    assert open(empty).read() == "t\n"
    assert csv_filename("disk_busy_fraction:local") == "disk_busy_fraction__local.csv"


def test_json_round_trip():
    b = _bundle()
    assert MetricsBundle.from_json(b.to_json()).series == b.series


def test_svg(tmp_path):
    b = _bundle()
    svg = render_svg(b, ["cache_bytes", "load_1m"], str(tmp_path / "x.svg"))
    assert svg == render_svg(b, ["cache_bytes", "load_1m"])
    assert svg.startswith("<svg") and svg.rstrip().endswith("</svg>")
    polylines = [line for line in svg.splitlines() if line.startswith("<polyline")]
    assert len(polylines) == 2
    points = polylines[0].split('points="')[1].split('"')[0].split()
    assert len(points) == 5
    assert "bytes" in svg and "ops" in svg and "t (s)" in svg
    with pytest.raises(MetricsError):
        render_svg(b, ["nope"])
    with pytest.raises(MetricsError):
        render_svg(b, [])
