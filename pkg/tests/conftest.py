import numpy as np
import pytest

from verigin.grid import Grid


def unit_mass(grid, rho):
    rho = np.asarray(rho, dtype=float)
    return rho / (rho.sum() * grid.cell_volume)


def gaussian_1d(grid, center=0.5, width=0.1, floor=0.0):
    x = grid.centers[0]
    return unit_mass(grid, np.exp(-(x - center) ** 2 / (2 * width ** 2)) + floor)


def interval_phase(grid, a, b):
    x = grid.centers[0]
    return ((x > a) & (x < b)).astype(np.int8)


@pytest.fixture
def grid10():
    return Grid.uniform(1, 10)


@pytest.fixture
def grid64():
    return Grid.uniform(1, 64)


def oracle_instance(seed, n=10):
    """Seeded skewed density with unit mass and a random initial phase on ``n`` cells."""
    grid = Grid.uniform(1, n)
    rng = np.random.default_rng(seed)
    rho = rng.uniform(0.05, 1, n) ** 3 * rng.uniform(1, 10)
    rho = unit_mass(grid, np.maximum(rho, 1e-3))
    chi = rng.integers(0, 2, n).astype(np.int8)
    return grid, rho, chi
