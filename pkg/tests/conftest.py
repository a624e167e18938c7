import warnings

import numpy as np
import pytest

from hflow.optics import OpticalParams

_VERDICTS: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def params():
    return OpticalParams()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def verdict():
    """Record an acceptance verdict; printed in the terminal summary."""

    def record(criterion: str, ok: bool, detail: str):
        _VERDICTS[criterion] = (bool(ok), detail)
        return ok

    return record


def pytest_configure(config):
    warnings.filterwarnings("ignore", message=".*background ring empty.*")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS, key=lambda k: int(k[1:])):
        ok, detail = _VERDICTS[key]
        terminalreporter.write_line(f"{key:<4} {'PASS' if ok else 'FAIL'}  {detail}")
