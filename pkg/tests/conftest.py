import sys
from pathlib import Path

import numpy as np
import pytest
import torch

TESTS_DIR = Path(__file__).parent
DATA_DIR = TESTS_DIR / "data"

sys.path.insert(0, str(TESTS_DIR))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory):
    from vibcreg.fixtures import make_fixtures

    root = tmp_path_factory.mktemp("fixtures")
    make_fixtures(root, seed=0)
    return root


@pytest.fixture(scope="session")
def data_dir():
    return DATA_DIR
