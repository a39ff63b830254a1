"""Shared fixtures for engine tests."""

import numpy as np
import pytest

from dsd.core import config
from dsd.core.rng import derive_rng
from dsd.models.lattice import DIRECTIONS, BoundaryCondition, IntensityGrid, shift_coords


@pytest.fixture(autouse=True)
def default_settings(monkeypatch):
    """Every test starts from default settings, whatever configure() did before."""
    monkeypatch.setattr(config, "settings", config.Settings())
    yield


@pytest.fixture
def rng():
    """Deterministic stream for a single test."""
    return derive_rng(20240101, "tests")


@pytest.fixture
def small_grid():
    """5x4 single-channel grid with 12 units."""
    values = np.zeros((5, 4, 1), dtype=np.int64)
    values[0, 0, 0] = 3
    values[2, 1, 0] = 4
    values[4, 3, 0] = 5
    return IntensityGrid(values=values)


@pytest.fixture
def rgb_grid():
    """4x4 three-channel grid with different totals per channel."""
    values = np.zeros((4, 4, 3), dtype=np.int64)
    values[1, 1] = [2, 0, 1]
    values[2, 3] = [1, 3, 0]
    values[0, 2] = [0, 1, 4]
    return IntensityGrid(values=values)


def build_generator(boundary: BoundaryCondition, width: int, height: int, rate: float) -> np.ndarray:
    """Dense single-particle generator, state index x * H + y."""
    n = width * height
    q = np.zeros((n, n))
    xs, ys = np.unravel_index(np.arange(n), (width, height))
    for d in DIRECTIONS:
        nx, ny, valid = shift_coords(xs, ys, d, boundary, width, height)
        for src in np.flatnonzero(valid):
            dst = nx[src] * height + ny[src]
            q[src, dst] += rate
            q[src, src] -= rate
    return q


@pytest.fixture
def dense_generator():
    return build_generator
