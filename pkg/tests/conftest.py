import numpy as np
import pytest
import torch

from slotrecon.data import SynthConfig, generate_synthetic_dataset


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """24 scenes (6 held out) with rendered images, generated once per session."""
    path = tmp_path_factory.mktemp("data") / "tiny"
    generate_synthetic_dataset(SynthConfig(n_samples=24, n_eval=6, seed=3), path)
    return path


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
