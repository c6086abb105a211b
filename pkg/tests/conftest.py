import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(1234)


TINY_TRAIN = {
    "pretrain_iters": 4,
    "semi_iters": 4,
    "base_width": 4,
    "depth": 2,
    "batch_labeled": 2,
    "batch_unlabeled": 2,
    "labeled_ratio": 0.2,
}


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """A 32x32, 24-sample dataset on disk with a 20% labeled split."""
    from biregion.datasets import SyntheticSpec, write_dataset

    root = tmp_path_factory.mktemp("data") / "tiny"
    write_dataset(root, SyntheticSpec(image_size=32, num_samples=24, seed=5), labeled_ratio=0.2)
    return root


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criteria suite")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])
