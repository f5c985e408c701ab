"""Occupation basis for the conserved-total-number sector.

The model space is ``source + N chain sites + drain``.  Chain sites are
hard-core (occupancy 0 or 1), the source and drain hold arbitrary counts.
Because every generator of the dynamics conserves the total particle number,
all work happens inside one sector: the set of occupation tuples

    (n_source, n_1, ..., n_N, n_drain)   with   n_source + sum(n_j) + n_drain = N_tot.

Canonical ordering is descending lexicographic on the full tuple, which puts
the fully-loaded source state (N_tot | 0...0 | 0) at index 0.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import StateNotInSectorError

__all__ = ["OccupationState", "SectorBasis", "enumerate_sector", "sector_dimension"]


@dataclass(frozen=True)
class OccupationState:
    """One occupation tuple (n_source | sites | n_drain)."""

    n_source: int
    sites: tuple[int, ...]
    n_drain: int

    def __post_init__(self):
        if self.n_source < 0 or self.n_drain < 0:
            raise ValueError("reservoir occupations must be non-negative")
        if any(s not in (0, 1) for s in self.sites):
            raise ValueError("site occupancies must be 0 or 1 (hard-core)")
        object.__setattr__(self, "sites", tuple(int(s) for s in self.sites))

    @property
    def total(self) -> int:
        return self.n_source + sum(self.sites) + self.n_drain

    def as_tuple(self) -> tuple[int, ...]:
        return (self.n_source, *self.sites, self.n_drain)

    def __str__(self):
        sites = ",".join(str(s) for s in self.sites)
        return f"({self.n_source}|{sites}|{self.n_drain})"


@dataclass(frozen=True)
class SectorBasis:
    """All occupation states of a fixed-total-number sector, canonically ordered.

    ``occupations`` is the same data as ``states`` in array form,
    shape (dim, n_sites + 2) with columns [source, site_1 .. site_N, drain],
    for use in numeric kernels.
    """

    n_sites: int
    n_tot: int
    states: tuple[OccupationState, ...]
    _index: dict[tuple[int, ...], int] = field(repr=False)
    occupations: np.ndarray = field(repr=False)

    @property
    def dim(self) -> int:
        return len(self.states)

    def index_of(self, state: OccupationState) -> int:
        """Position of ``state`` in canonical order; StateNotInSectorError if absent."""
        key = state.as_tuple() if isinstance(state, OccupationState) else tuple(state)
        try:
            return self._index[key]
        except KeyError:
            raise StateNotInSectorError(
                f"state {key} is not in the (n_sites={self.n_sites}, n_tot={self.n_tot}) sector"
            ) from None

    def state_of(self, index: int) -> OccupationState:
        return self.states[index]

    def __len__(self):
        return len(self.states)

    def __eq__(self, other):
        if not isinstance(other, SectorBasis):
            return NotImplemented
        return self.n_sites == other.n_sites and self.n_tot == other.n_tot

    def __hash__(self):
        return hash((self.n_sites, self.n_tot))

    def initial_index(self) -> int:
        """Index of the fully-loaded-source state (N_tot | 0...0 | 0)."""
        return self.index_of(
            OccupationState(self.n_tot, (0,) * self.n_sites, 0)
        )


def sector_dimension(n_sites: int, n_tot: int) -> int:
    """Closed-form sector size: sum_k C(n_sites, k) * (n_tot - k + 1).

    k counts particles on the chain; the remaining n_tot - k particles split
    between source and drain in n_tot - k + 1 ways.
    """
    from math import comb

    return sum(
        comb(n_sites, k) * (n_tot - k + 1)
        for k in range(min(n_sites, n_tot) + 1)
    )


def enumerate_sector(n_sites: int, n_tot: int) -> SectorBasis:
    """Build the canonical basis of the (n_sites, n_tot) sector.

    States are ordered descending-lexicographically on the tuple
    (n_source, site_1, ..., site_N, n_drain); the ordering is deterministic
    and the fully-loaded source state always lands at index 0.
    """
    if not isinstance(n_sites, int) or not isinstance(n_tot, int):
        raise ValueError("n_sites and n_tot must be integers")
    if n_sites < 1:
        raise ValueError(f"n_sites must be >= 1, got {n_sites}")
    if n_tot < 1:
        raise ValueError(f"n_tot must be >= 1, got {n_tot}")

    states = []
    for n_source in range(n_tot, -1, -1):
        budget = n_tot - n_source
        # product over (1, 0) yields site tuples in descending lexicographic order
        for sites in itertools.product((1, 0), repeat=n_sites):
            on_chain = sum(sites)
            if on_chain <= budget:
                states.append(OccupationState(n_source, sites, budget - on_chain))

    index = {s.as_tuple(): i for i, s in enumerate(states)}
    occupations = np.array([s.as_tuple() for s in states], dtype=np.int64)
    return SectorBasis(
        n_sites=n_sites,
        n_tot=n_tot,
        states=tuple(states),
        _index=index,
        occupations=occupations,
    )
