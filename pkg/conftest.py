import math

import numpy as np
import pytest

from srperm.models.config import BoxGeometry, CycleWeightModel, JumpKernel


class Seeded:
    """Generator factory pulled out into a fixture with a repr, so the seed shows on failing tests"""

    def __init__(self, seed=20240611):
        self.seed = seed

    def __repr__(self):
        return f"Seeded({self.seed})"

    def __call__(self, *keys):
        return np.random.default_rng(np.random.SeedSequence([self.seed, *keys]))


@pytest.fixture
def seeded():
    return Seeded()


@pytest.fixture
def rng(seeded):
    return seeded(0)


@pytest.fixture
def unit_kernel():
    """Gaussian kernel in d = 3 with 4 pi beta = 1, so rho_c = zeta(3/2) at alpha = 0"""
    return JumpKernel(family="gaussian", d=3, beta=1 / (4 * math.pi))


@pytest.fixture
def ewens2():
    """Constant weights with theta = 2"""
    return CycleWeightModel(regime="constant", alpha=-math.log(2))


@pytest.fixture
def small_box():
    return BoxGeometry(L=2.0, d=3)
