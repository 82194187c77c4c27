import os

import numpy as np
import pytest

from gradleak.data import cifar10_available, find_cifar10_dir
from gradleak.numerics import RngStream


@pytest.fixture
def rng():
    return RngStream(12345)


@pytest.fixture(scope="session")
def cifar_dir():
    if not cifar10_available():
        pytest.skip("CIFAR-10 binaries not found (set GRADLEAK_DATA_DIR)")
    return str(find_cifar10_dir())


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running Monte-Carlo checks")


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def report_criterion():
    """Record and print one acceptance line; the summary repeats them at the end."""

    def _record(number, ok, detail):
        status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        line = f"criterion {number:>2}: {status}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
