from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent))

from iopgspo import policy_model as pm  # noqa: E402
from iopgspo.task_env import generate_problem  # noqa: E402

torch.set_num_threads(1)


@pytest.fixture
def tiny_gru():
    return pm.init(0, pm.Architecture(width=12, n_layers=1, kind="gru"))


@pytest.fixture
def tiny_attn():
    return pm.init(0, pm.Architecture(width=12, n_layers=1, n_heads=2, kind="attention"))


@pytest.fixture
def problem():
    return generate_problem(7, 5)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
