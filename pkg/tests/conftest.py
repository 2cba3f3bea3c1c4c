import numpy as np
import pytest

from drnet.backbone import BackboneConfig, Network
from drnet.config import toy_config


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_net():
    return Network(toy_config(), seed=0)


def small_config(**kw):
    """A 2-cell, 4-channel network that runs in milliseconds at 8x8 input."""
    params = dict(L=2, init_channels=4, input_size=8, num_classes=3)
    params.update(kw)
    return BackboneConfig(**params)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict = {}


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
