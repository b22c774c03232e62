import numpy as np
import pytest
import torch

from sparseseg import model as M
from sparseseg.sparsifier import Points
from sparseseg.task_store import SynthSpec, make_tasks, synth_generate

torch.set_num_threads(1)

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def tiny_config():
    return M.ModelConfig(encoder_channels=(2, 4, 8), center_channels=16, input_side=16)


@pytest.fixture(scope="session")
def tiny_datasets():
    spec = SynthSpec(modalities=["gradient", "speckle", "banded"], classes=["ellipse", "stripe"],
                     images_per_dataset=10, side=16)
    return synth_generate(spec, seed=3)


@pytest.fixture(scope="session")
def tiny_tasks(tiny_datasets):
    return make_tasks(tiny_datasets, side=16, seed=3, sparsity=Points(3))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
