import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(__file__))

from poolforge.pool import create_pool  # noqa: E402
from poolforge.vdev import create_device  # noqa: E402


def make_devices(root, n=4, sectors=8192, sector_size=512, prefix="d"):
    os.makedirs(root, exist_ok=True)
    return [create_device(os.path.join(root, f"{prefix}{i}"), sectors, sector_size)
            for i in range(n)]


def make_pool(root, n=4, sectors=8192, name="tank", prefix="d", **kw):
    devs = make_devices(root, n, sectors, prefix=prefix)
    return create_pool(devs, name, guid=name.encode().ljust(16, b"_")[:16], **kw)


@pytest.fixture
def pool(tmp_path):
    p = make_pool(str(tmp_path))
    yield p
    p.close()


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
