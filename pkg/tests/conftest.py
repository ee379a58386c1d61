import numpy as np
import pytest

from splitvfl import _backend

# (criterion number, title, passed, detail) appended by tests/test_acceptance.py
ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numba", "numpy"])
def backend(request):
    """Run a test once per kernel backend, restoring the original afterwards."""
    if request.param == "numba" and not _backend.HAVE_NUMBA:
        pytest.skip("numba not installed")
    before = _backend.backend_name()
    _backend.set_backend(request.param)
    yield request.param
    _backend.set_backend(before)


@pytest.fixture
def acceptance():
    def record(number: int, title: str, passed: bool, detail: str = "") -> bool:
        ACCEPTANCE.append((number, title, bool(passed), detail))
        print(f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {title} ({detail})")
