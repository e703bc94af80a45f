import numpy as np
import pytest

from tlalign.numerics import make_rng
from tlalign.vit import ModelConfig, init_params

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_cfg():
    return ModelConfig(image_size=4, patch_size=2, depth=2, dim=8, heads=2, num_classes=3)


@pytest.fixture
def small_cfg():
    return ModelConfig(image_size=8, patch_size=2, depth=2, dim=16, heads=2, num_classes=4)


@pytest.fixture
def small_params(small_cfg):
    return init_params(small_cfg, make_rng(0, 0), np.float64)


@pytest.fixture
def rng():
    return make_rng(1234, 99)
