import os
from pathlib import Path

import numpy as np
import pytest

from nomaslice.outage import GridSpec, build_table

ROOT = Path(__file__).resolve().parent.parent
RESULTS = ROOT / "results"
TABLE_CACHE = Path(os.environ.get("NOMASLICE_TABLE_DIR", RESULTS / "tables"))

# fast grid for unit tests: 0.5 dB signal steps, 2 dB interference steps
COARSE = GridSpec(-10.0, 50.0, 0.5, -20.0, 40.0, 2.0)


@pytest.fixture(scope="session")
def table_1fr():
    """F_u=1, r_bar_u=1 table at eps 1e-2 on the coarse grid."""
    return build_table(1, 1.0, 1e-2, COARSE, seed=3, schedule=(100_000,))


@pytest.fixture(scope="session")
def small_tables():
    """Coarse eps=1e-2 tables for F=4 allocations: NOMA F_u=4, OMA F_u=1 and 2."""
    return {
        F_u: build_table(F_u, 1.0 / F_u, 1e-2, COARSE, seed=5, schedule=(100_000,))
        for F_u in (1, 2, 4)
    }


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[int, str] = {}


def report(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
