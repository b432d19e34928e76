from __future__ import annotations

import socket
import threading

import pytest

from lifesync._util import parse_ts
from lifesync.api import ApiApp, start_background
from lifesync.client import ApiClient
from lifesync.ledger import Ledger
from lifesync.service import Platform

T0 = parse_ts("2026-03-02T08:00:00.000Z")
HOUR = 3_600_000


class ManualClock:
    def __init__(self, start: int = T0):
        self.now = start

    def __call__(self) -> int:
        return self.now

    def advance(self, ms: int) -> int:
        self.now += ms
        return self.now


@pytest.fixture
def clock():
    return ManualClock()


@pytest.fixture
def ledger(tmp_path):
    return Ledger(tmp_path / "data", fsync=False)


@pytest.fixture
def platform(ledger, clock):
    return Platform(ledger, clock=clock)


@pytest.fixture
def app(platform):
    return ApiApp(platform, test_clock=True)


@pytest.fixture
def server(app):
    srv = start_background(app)
    yield srv
    srv.shutdown()
    srv.server_close()


@pytest.fixture
def client(server):
    c = ApiClient(server.url, timeout=5.0)
    yield c
    c.close()


@pytest.fixture
def blackhole():
    """A listener that accepts connections and never answers."""
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    sock.listen(256)
    held, stop = [], threading.Event()

    def accept():
        sock.settimeout(0.2)
        while not stop.is_set():
            try:
                held.append(sock.accept()[0])
            except OSError:
                continue

    t = threading.Thread(target=accept, daemon=True)
    t.start()
    yield f"http://127.0.0.1:{sock.getsockname()[1]}"
    stop.set()
    t.join()
    for c in held:
        c.close()
    sock.close()


# -- acceptance reporting: one PASS/FAIL line per criterion ----------------------

_measure_key = pytest.StashKey[dict]()
_criterion_lines: list[str] = []


@pytest.fixture
def measured(request):
    """Record named measurements shown next to the criterion's result line."""
    values = request.node.stash.setdefault(_measure_key, {})
    return values.update


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or rep.when != "call":
        return
    number, title = marker.args
    values = item.stash.get(_measure_key, {})
    detail = ", ".join(f"{k}={v}" for k, v in values.items())
    verdict = "PASS" if rep.passed else "FAIL"
    _criterion_lines.append(f"criterion {number} {verdict}: {title}" + (f" [{detail}]" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
