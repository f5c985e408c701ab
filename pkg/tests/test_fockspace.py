"""Sector enumeration: dimensions, canonical order, index round trips."""

import itertools

import numpy as np
import pytest

from klsim.errors import StateNotInSectorError
from klsim.fockspace import OccupationState, enumerate_sector, sector_dimension


def brute_force_states(n_sites, n_tot):
    """Independent enumeration: all (source | sites | drain) with the right total."""
    out = []
    for sites in itertools.product((0, 1), repeat=n_sites):
        for n_source in range(n_tot - sum(sites) + 1):
            n_drain = n_tot - sum(sites) - n_source
            out.append((n_source, *sites, n_drain))
    return out


@pytest.mark.parametrize("n_sites", [1, 2, 3, 5])
@pytest.mark.parametrize("n_tot", [1, 2, 3, 6])
def test_dimension_matches_brute_force(n_sites, n_tot):
    assert sector_dimension(n_sites, n_tot) == len(brute_force_states(n_sites, n_tot))
    assert enumerate_sector(n_sites, n_tot).dim == len(brute_force_states(n_sites, n_tot))


def test_dimension_known_values():
    # five-site chain: dim = 32*N - 48 once every site pattern is reachable (N >= 4)
    known = {2: 23, 3: 49, 4: 80, 9: 240, 12: 336, 14: 400}
    for n_tot, dim in known.items():
        assert sector_dimension(5, n_tot) == dim
    for n_tot in range(4, 15):
        assert sector_dimension(5, n_tot) == 32 * n_tot - 48


def test_canonical_order_descending_lex():
    basis = enumerate_sector(2, 2)
    tuples = [s.as_tuple() for s in basis.states]
    assert tuples == sorted(tuples, reverse=True)
    assert tuples[0] == (2, 0, 0, 0)


def test_initial_index_is_zero():
    for n_sites, n_tot in [(1, 1), (5, 2), (5, 9)]:
        basis = enumerate_sector(n_sites, n_tot)
        assert basis.initial_index() == 0
        first = basis.state_of(0)
        assert first.n_source == n_tot
        assert first.n_drain == 0
        assert sum(first.sites) == 0


def test_index_round_trip():
    basis = enumerate_sector(5, 3)
    for i, state in enumerate(basis.states):
        assert basis.index_of(state) == i
        assert basis.state_of(i) is state
        assert state.total == 3


def test_occupations_array_matches_states():
    basis = enumerate_sector(5, 2)
    expected = np.array([s.as_tuple() for s in basis.states])
    np.testing.assert_array_equal(basis.occupations, expected)
    assert basis.occupations.shape == (basis.dim, 7)


def test_state_not_in_sector():
    basis = enumerate_sector(5, 2)
    with pytest.raises(StateNotInSectorError):
        basis.index_of(OccupationState(3, (0, 0, 0, 0, 0), 0))


def test_hard_core_validation():
    with pytest.raises(ValueError):
        OccupationState(0, (2, 0), 0)
    with pytest.raises(ValueError):
        OccupationState(-1, (0, 0), 1)


def test_bad_sector_arguments():
    with pytest.raises(ValueError):
        enumerate_sector(0, 2)
    with pytest.raises(ValueError):
        enumerate_sector(5, 0)
