"""Shared helpers: deterministic random density matrices and tiny sectors."""

import numpy as np
import pytest

from klsim.evolution import DensityMatrix
from klsim.fockspace import enumerate_sector


def random_density(basis, seed=0):
    """Random full-rank density matrix on ``basis`` (Hermitian, PSD, trace 1)."""
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((basis.dim, basis.dim)) \
        + 1j * rng.standard_normal((basis.dim, basis.dim))
    rho = a @ a.conj().T
    rho /= np.trace(rho).real
    return DensityMatrix(basis=basis, matrix=rho)


@pytest.fixture
def basis52():
    return enumerate_sector(5, 2)


@pytest.fixture
def basis11():
    return enumerate_sector(1, 1)
