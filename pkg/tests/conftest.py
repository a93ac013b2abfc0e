from __future__ import annotations

from dataclasses import dataclass

import pytest
from fastapi.testclient import TestClient

from lila.server import create_app
from lila.signing import BuilderKey, keygen
from lila.store import Store

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    number, title = marker.args
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        verdict = "PASS" if report.passed else "FAIL"
        prev = _criteria.get(number)
        if prev is None or prev[1] == "PASS":
            _criteria[number] = (title, verdict)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f"criterion {number}: {verdict}  {title}")


class FakeClock:
    def __init__(self, start: int = 1_760_000_000) -> None:
        self.now = start

    def __call__(self) -> float:
        return float(self.now)

    def tick(self, seconds: int = 1) -> None:
        self.now += seconds


@dataclass
class Builder:
    key: BuilderKey
    token: str

    @property
    def name(self) -> str:
        return self.key.name

    @property
    def auth(self) -> dict[str, str]:
        return {"Authorization": f"Bearer {self.token}"}


@pytest.fixture
def prefix(tmp_path):
    p = tmp_path / "nix" / "store"
    p.mkdir(parents=True)
    return str(p)


@pytest.fixture
def store(tmp_path, prefix):
    s = Store(tmp_path / "lila.db", store_prefix=prefix)
    yield s
    s.close()


def register(store: Store, name: str, seed_byte: int) -> Builder:
    key = keygen(name, bytes([seed_byte]) * 32)
    store.upsert_user(name, key.public)
    return Builder(key, store.create_token(name))


@pytest.fixture
def builders(store):
    return [register(store, f"builder{i}", i + 1) for i in range(3)]


@pytest.fixture
def clock():
    return FakeClock()


@pytest.fixture
def reports_dir(tmp_path):
    d = tmp_path / "reports"
    d.mkdir()
    return d


@pytest.fixture
def app(store, reports_dir, clock):
    return create_app(store, reports_dir=reports_dir, clock=clock)


@pytest.fixture
def client(app):
    with TestClient(app) as c:
        yield c
