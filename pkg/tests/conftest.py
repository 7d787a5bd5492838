"""Shared fixtures: deterministic RNG streams and small reference grids."""

import numpy as np
import pytest

from densecorr.grid import FeatureGrid


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(12345))


def random_grid(rng, h=4, w=5, dim=3, stride=8.0, normalized=False):
    data = rng.normal(size=(h, w, dim)).astype(np.float32)
    return FeatureGrid(data=data, stride_px=stride, normalized=normalized)


@pytest.fixture
def grid_4x5(rng):
    return random_grid(rng)
