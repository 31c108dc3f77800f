import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from metaglmm import load_bundled, sobol_nodes  # noqa: E402


@pytest.fixture(scope="session")
def long2020():
    return load_bundled("long2020")


@pytest.fixture(scope="session")
def nodes2048():
    return sobol_nodes(2048)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    import acceptance_log

    if acceptance_log.LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acceptance_log.LINES, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
