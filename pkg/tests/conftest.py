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


@pytest.fixture(scope="session")
def small_gaussian():
    from coupledmil.bagdata import generate_gaussian_bags

    return generate_gaussian_bags(40, (4, 8), dim=4, class_separation=4.0, seed=3, witness_rate=0.3)
