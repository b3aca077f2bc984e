import io
import json
import os

import pytest

from poolforge import cli

SCENARIO = """
[scenario]
seed = 4
duration = 20

[node a]
children = 3
capacity = 2MiB

[node b]
children = 3
capacity = 2MiB

[link a b]
bandwidth = 2MiB
latency_ms = 10

[workload]
every = 2 1 8KiB random wrap=64KiB

[policy]
source = a
target = b
interval = 5
"""


@pytest.fixture
def run(tmp_path, monkeypatch):
    monkeypatch.setenv("POOLFORGE_HOME", str(tmp_path / "home"))
    monkeypatch.chdir(tmp_path)

    def invoke(*argv, fmt="json"):
        out, err = io.StringIO(), io.StringIO()
        code = cli.main(["--format", fmt, *argv], out, err)
        text = out.getvalue()
        data = json.loads(text) if fmt == "json" and code == 0 and text.strip() else None
        return code, data, err.getvalue()
    return invoke


def devs(prefix):
    return ",".join(f"{prefix}{i}.img" for i in range(4))


def test_every_operation_has_a_command():
    commands = set(cli.subcommands())
    for op, command in cli.OPERATIONS.items():
        assert command in commands, op
    assert {"pool create", "pool status", "send", "recv", "sim run", "metrics plot"} <= commands


def test_pool_lifecycle(run):
    code, st, _ = run("pool", "create", "--dev", devs("d"), "--capacity", "2MiB", "tank")
    assert code == 0 and st["width"] == 4 and st["state"] == "healthy"
    assert run("fs", "create", "tank/home")[0] == 0
    code, w, _ = run("fs", "write", "tank/home", "1", "0", "--data", "hello pool")
    assert code == 0 and w["bytes"] == 10
    code, r, _ = run("fs", "read", "tank/home", "1")
    assert bytes.fromhex(r["hex"]) == b"hello pool"
    assert run("fs", "snapshot", "tank/home@a")[0] == 0
    code, st, _ = run("pool", "status", "tank")
    assert st["datasets"] == ["tank/home"] and st["txg"] >= 3
    assert run("pool", "check", "tank")[1]["space"] == "consistent"
    code, scrub, _ = run("pool", "scrub", "tank")
    assert code == 0 and scrub["permanent_errors"] == 0
    code, listing, _ = run("fs", "list", "tank")
    assert listing["datasets"][0]["snapshots"][0]["name"] == "a"
    assert run("pool", "export", "tank")[0] == 0
    code, st, _ = run("pool", "import", "--dev", devs("d"))
    assert code == 0 and st["name"] == "tank"


def test_send_recv_through_files(run):
    run("pool", "create", "--dev", devs("s"), "--capacity", "2MiB", "src")
    run("pool", "create", "--dev", devs("t"), "--capacity", "2MiB", "dst")
    run("fs", "create", "src/vol")
    run("fs", "write", "src/vol", "1", "0", "--hex", "00ff" * 3000)
    run("fs", "snapshot", "src/vol@one")
    run("fs", "write", "src/vol", "1", "100", "--data", "changed")
    run("fs", "snapshot", "src/vol@two")
    assert run("send", "src/vol@one", "--full", "-o", "full.bin")[0] == 0
    assert run("send", "src/vol@two", "--from", "one", "-o", "inc.bin")[0] == 0
    assert run("recv", "dst", "-i", "full.bin")[1]["snapshot"] == "dst/vol@one"
    assert run("recv", "dst", "-i", "inc.bin")[1]["snapshot"] == "dst/vol@two"
    h_src = run("fs", "hash", "src/vol@two")[1]["content_hash"]
    h_dst = run("fs", "hash", "dst/vol@two")[1]["content_hash"]
    assert h_src == h_dst
    code, d, _ = run("diff", "src/vol@one", "src/vol@two")
    assert d["changes"] == [{"object": 1, "start": 0, "end": 131072, "kind": "write"}]


def test_degraded_write_and_scrub(run):
    run("pool", "create", "--dev", devs("d"), "--capacity", "2MiB", "tank")
    run("fs", "create", "tank/vol")
    run("fs", "write", "tank/vol", "1", "0", "--data", "x" * 5000)
    assert run("fault", "inject", "d2.img", "--kind", "offline")[0] == 0
    assert run("pool", "status", "tank")[1]["state"] == "degraded"
    code, w, _ = run("fs", "write", "tank/vol", "2", "0", "--data", "degraded" * 2000)
    assert code == 0
    assert run("fault", "clear", "d2.img")[0] == 0
    assert run("pool", "status", "tank")[1]["state"] == "healthy"
    code, scrub, _ = run("pool", "scrub", "tank")
    assert code == 0 and scrub["repaired"] > 0 and scrub["permanent_errors"] == 0
    assert run("pool", "scrub", "tank")[1]["repaired"] == 0
    assert bytes.fromhex(run("fs", "read", "tank/vol", "2")[1]["hex"]) == b"degraded" * 2000


def test_exit_codes(run):
    assert run("pool", "frobnicate")[0] == cli.EXIT_USAGE
    assert run("send", "x/y@z")[0] == cli.EXIT_USAGE  # neither --full nor --from
    code, _, err = run("pool", "status", "missing")
    assert code == cli.EXIT_OPERATIONAL and "missing" in err
    run("pool", "create", "--dev", devs("d"), "--capacity", "2MiB", "tank")
    code, _, err = run("fs", "read", "tank/none", "1")
    assert code == cli.EXIT_OPERATIONAL
    with open("bad.cfg", "w") as fh:
        fh.write("[policy]\nsource = a\nnonsense = 1\n")
    code, _, err = run("sim", "run", "bad.cfg")
    assert code == cli.EXIT_OPERATIONAL and "line 3" in err


def test_text_format(run):
    code, _, _ = run("pool", "create", "--dev", devs("d"), "--capacity", "2MiB", "tank")
    out = io.StringIO()
    assert cli.main(["pool", "status", "tank"], out, io.StringIO()) == 0
    assert "width: 4" in out.getvalue() and "state: healthy" in out.getvalue()


def test_sim_run_is_reproducible(run, tmp_path):
    with open("s.cfg", "w") as fh:
        fh.write(SCENARIO)
    outputs = []
    for name in ("a", "b"):
        code, summary, err = run("sim", "run", "s.cfg", "--out", name)
        assert code == 0, err
        assert summary["consistent"] and summary["ticks"] == 4
        files = {}
        for root, _, names in os.walk(name):
            for n in names:
                with open(os.path.join(root, n), "rb") as fh:
                    files[os.path.relpath(os.path.join(root, n), name)] = fh.read()
        outputs.append(files)
    assert outputs[0] == outputs[1]
    assert any(k.endswith(".svg") for k in outputs[0]) and "events.log" in outputs[0]
    code, ex, _ = run("metrics", "export", "a/metrics.json", "--out", "csv")
    series = [k for k in outputs[0] if k.startswith("series" + os.sep)]
    assert code == 0 and len(ex["written"]) == len(series) > 0
    code, pl, _ = run("metrics", "plot", "a/metrics.json", "--series", "uptime_s", "--out", "u.svg")
    assert code == 0 and open("u.svg").read().startswith("<svg")
