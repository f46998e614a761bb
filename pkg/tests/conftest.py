import numpy as np
import pytest

ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 10


@pytest.fixture
def acceptance():
    """Record the outcome of one acceptance criterion for the summary."""

    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            tr.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            tr.write_line(f"criterion {n:2d}: NOT RUN")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
