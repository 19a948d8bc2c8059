import numpy as np
import pytest
import torch

from helper.flow import Conditioning
from helper.latent import Extent5, LatentGrid, Rng, sample_gaussian


class ConstantVelocity:
    """Returns the same velocity field whatever the input."""

    def __init__(self, u: LatentGrid):
        self.u = u

    def evaluate(self, z, sigma, cond):
        return self.u


class ZeroVelocity:
    def evaluate(self, z, sigma, cond):
        return LatentGrid.zeros(z.extent)


class LinearVelocity:
    """u = a * z, so dz/dsigma = a z has the closed form z(s) = z(1) exp(a (s - 1))."""

    def __init__(self, a: float):
        self.a = a

    def evaluate(self, z, sigma, cond):
        return LatentGrid(self.a * z.values)


class ReplayNoise:
    """Stand-in generator that hands out prepared arrays in order."""

    def __init__(self, *arrays):
        self.arrays = list(arrays)
        self.shapes = []

    def standard_normal(self, shape):
        self.shapes.append(tuple(shape))
        return self.arrays.pop(0)


@pytest.fixture
def cond():
    return Conditioning.fixed(8, 99)


@pytest.fixture
def random_grid():
    def make(extent, seed=0):
        if isinstance(extent, tuple):
            extent = Extent5(*extent)
        return sample_gaussian(extent, Rng(seed))
    return make


@pytest.fixture(autouse=True)
def _torch_determinism():
    torch.manual_seed(0)
    np.random.seed(0)
