import os
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gepiii.cli import main  # noqa: E402
from gepiii.config import synthetic_spec_path  # noqa: E402
from gepiii.synthetic import SyntheticSpec, generate_synthetic  # noqa: E402


@pytest.fixture(scope="session")
def small_data(tmp_path_factory):
    """The shipped ``small`` synthetic dataset and its manifest."""
    out = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec.from_file(synthetic_spec_path("small"))
    manifest = generate_synthetic(spec, out)
    return out, manifest


@pytest.fixture(scope="session")
def winner5_run(tmp_path_factory):
    """One end-to-end ``run`` of the winner5 preset, shared by several tests."""
    work = tmp_path_factory.mktemp("winner5")
    t0 = time.perf_counter()
    code = main(["run", "--config", "winner5", "--work-dir", str(work), "--threads", "1", "-q"])
    elapsed = time.perf_counter() - t0
    assert code == 0
    return {"work": work, "seconds": elapsed, "code": code}


def cli_env(threads: int | None = None) -> dict:
    env = dict(os.environ)
    if threads is not None:
        env["NUMBA_NUM_THREADS"] = str(threads)
    return env


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion a test checks")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    entry = _CRITERIA.setdefault(number, {"title": title, "ok": True, "tests": []})
    if report.when == "call" or report.failed:
        if report.failed:
            entry["ok"] = False
        if report.when == "call":
            entry["tests"].append(item.name)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        entry = _CRITERIA[number]
        status = "PASS" if entry["ok"] and entry["tests"] else "FAIL"
        terminalreporter.write_line(f"criterion {number:>2}  {status}  {entry['title']}")
