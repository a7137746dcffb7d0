import time

import numpy as np
import pytest

from planeparallax.synthetic import SceneConfig, generate_scene

SUITE_BUDGET_S = 60.0
_results: dict[int, list] = {}
_start = time.perf_counter()


@pytest.fixture(scope="session")
def scene():
    return generate_scene(SceneConfig())


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def criterion():
    """Record one acceptance check: ``criterion(number, name, ok, detail)``."""

    def record(number: int, name: str, ok: bool, detail: str = "") -> bool:
        _results.setdefault(number, []).append((name, bool(ok), detail))
        print(f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}")
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    elapsed = time.perf_counter() - _start
    if not _results:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(_results):
        for name, ok, detail in _results[number]:
            tr.write_line(f"criterion {number:2d} {'PASS' if ok else 'FAIL'} {name}: {detail}")
    ok = elapsed < SUITE_BUDGET_S
    tr.write_line(f"criterion 11 {'PASS' if ok else 'FAIL'} suite runtime: {elapsed:.1f} s "
                  f"(budget {SUITE_BUDGET_S:.0f} s)")


def pytest_sessionfinish(session, exitstatus):
    if time.perf_counter() - _start >= SUITE_BUDGET_S and exitstatus == 0:
        session.exitstatus = 1
