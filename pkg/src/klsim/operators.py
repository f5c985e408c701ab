"""Sector operators: Hamiltonian, jump operators, number operators.

The chain Hamiltonian is

    H = -hbar*c * sum_{j=1..N-1} (sig_j^+ sig_{j+1} + sig_{j+1}^+ sig_j)
        + (1/2) * sum_{j != j'} U / |j - j'| * n_j n_j'

with hard-core raising/lowering on the chain sites; source and drain enter
neither the hopping nor the Coulomb sum.  The number-conserving jump
operators move one particle between a reservoir and the adjacent chain end:

    L_s = sig_1^+ sig_0       (source -> site 1, bosonic sqrt(n_source) amplitude)
    L_d = sig_{N+1}^+ sig_N   (site N -> drain, bosonic sqrt(n_drain + 1) amplitude)

Bare ladder operators map between adjacent sectors and are kept internal to
this module; only number-conserving compositions are exposed as square
operators.  Chain sites are string-free hard-core modes by default; a
Jordan-Wigner string variant (sign (-1)^(n_1+...+n_{N-1}) on the drain jump)
is available behind a flag for the population-insensitivity comparison.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import BasisMismatchError, InvalidModeError
from .fockspace import OccupationState, SectorBasis, enumerate_sector

__all__ = [
    "ModelParams",
    "SectorOperator",
    "JumpMap",
    "ladder_down",
    "build_hamiltonian",
    "build_jump_source",
    "build_jump_drain",
    "number_operator",
    "total_number_operator",
    "hamiltonian_csr",
    "jump_map",
]

# Dense storage below this sector dimension, CSR above.
SPARSE_CROSSOVER = 64


@dataclass(frozen=True)
class ModelParams:
    """Model parameters in simulation units (hbar = c_hop = 1 by default).

    ``u`` is the Coulomb strength in units of hbar * c_hop.  The derived
    effective hopping c_eff = hbar * c_hop**2 / u sets the transport
    timescale; rescaled time is tau = t * c_eff.
    """

    n_tot: int
    u: float
    n_sites: int = 5
    hbar: float = 1.0
    c_hop: float = 1.0
    gamma_s: float = 0.0
    gamma_d: float = 0.0

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError(f"n_sites must be >= 1, got {self.n_sites}")
        if self.n_tot < 1:
            raise ValueError(f"n_tot must be >= 1, got {self.n_tot}")
        if self.u <= 0:
            raise ValueError(f"u must be > 0, got {self.u}")
        if self.c_hop <= 0:
            raise ValueError(f"c_hop must be > 0, got {self.c_hop}")
        if self.hbar <= 0:
            raise ValueError(f"hbar must be > 0, got {self.hbar}")
        if self.gamma_s < 0 or self.gamma_d < 0:
            raise ValueError("gamma_s and gamma_d must be >= 0")

    @property
    def c_eff(self) -> float:
        """Effective hopping hbar * c_hop**2 / u (> 0 by construction)."""
        return self.hbar * self.c_hop**2 / self.u

    @classmethod
    def matched_rates(cls, n_tot: int, u: float, n_sites: int = 5, **kw) -> "ModelParams":
        """Parameters with supply/leak rates matched to the effective hopping.

        gamma_s = gamma_d = c_eff, i.e. both reduced rates equal one; this is
        the throughput-optimal operating point used for all experiments.
        """
        p = cls(n_tot=n_tot, u=u, n_sites=n_sites, **kw)
        c_eff = p.c_eff
        return cls(
            n_tot=n_tot, u=u, n_sites=n_sites, hbar=p.hbar, c_hop=p.c_hop,
            gamma_s=c_eff, gamma_d=c_eff,
        )

    def basis(self) -> SectorBasis:
        return enumerate_sector(self.n_sites, self.n_tot)


class SectorOperator:
    """A linear operator between sector bases (square when codomain == domain).

    ``matrix`` is dense ndarray or scipy CSR depending on size; semantically
    it is always just a matrix over the canonical basis order.
    """

    def __init__(self, basis: SectorBasis, matrix, codomain: SectorBasis | None = None):
        self.basis = basis
        self.codomain = codomain if codomain is not None else basis
        expected = (self.codomain.dim, basis.dim)
        if matrix.shape != expected:
            raise BasisMismatchError(
                f"matrix shape {matrix.shape} does not match bases {expected}"
            )
        self.matrix = matrix

    @property
    def is_square(self) -> bool:
        return self.codomain == self.basis

    def toarray(self) -> np.ndarray:
        if sp.issparse(self.matrix):
            return self.matrix.toarray()
        return np.asarray(self.matrix)

    def dagger(self) -> "SectorOperator":
        return SectorOperator(self.codomain, self.matrix.conj().T, self.basis)

    def __matmul__(self, other):
        if isinstance(other, SectorOperator):
            if other.codomain != self.basis:
                raise BasisMismatchError("operator domains do not line up for composition")
            return SectorOperator(other.basis, self.matrix @ other.matrix, self.codomain)
        return self.matrix @ other

    def __add__(self, other):
        if isinstance(other, SectorOperator):
            if other.basis != self.basis or other.codomain != self.codomain:
                raise BasisMismatchError("cannot add operators over different bases")
            return SectorOperator(self.basis, self.matrix + other.matrix, self.codomain)
        return NotImplemented

    def __sub__(self, other):
        if isinstance(other, SectorOperator):
            if other.basis != self.basis or other.codomain != self.codomain:
                raise BasisMismatchError("cannot subtract operators over different bases")
            return SectorOperator(self.basis, self.matrix - other.matrix, self.codomain)
        return NotImplemented

    def __mul__(self, scalar):
        return SectorOperator(self.basis, self.matrix * scalar, self.codomain)

    __rmul__ = __mul__

    def hermiticity_defect(self) -> float:
        """max |M - M^dagger| elementwise (square operators only)."""
        m = self.toarray()
        return float(np.max(np.abs(m - m.conj().T))) if m.size else 0.0


def _wrap(basis: SectorBasis, rows, cols, vals, codomain: SectorBasis | None = None,
          dtype=np.float64) -> SectorOperator:
    co = codomain if codomain is not None else basis
    shape = (co.dim, basis.dim)
    if max(shape) > SPARSE_CROSSOVER:
        m = sp.csr_matrix((vals, (rows, cols)), shape=shape, dtype=dtype)
    else:
        m = np.zeros(shape, dtype=dtype)
        for r, c, v in zip(rows, cols, vals):
            m[r, c] += v
    return SectorOperator(basis, m, codomain)


def _mode_column(basis: SectorBasis, mode) -> int:
    """Column index of ``mode`` in the occupation array: 0 = source,
    1..N = chain sites, N+1 = drain."""
    if mode == "source":
        return 0
    if mode == "drain":
        return basis.n_sites + 1
    if isinstance(mode, (int, np.integer)) and 1 <= mode <= basis.n_sites:
        return int(mode)
    raise InvalidModeError(
        f"mode must be 'source', 'drain', or a site index 1..{basis.n_sites}, got {mode!r}"
    )


def ladder_down(basis: SectorBasis, mode) -> SectorOperator:
    """Lowering operator for one mode, mapping sector N_tot to sector N_tot - 1.

    Bosonic modes (source, drain) carry sqrt(n) amplitudes; chain sites map
    occupancy 1 -> 0 with amplitude 1 and annihilate occupancy 0.  The result
    is rectangular: compose with a raising partner (``.dagger()`` of another
    mode's ladder_down on the same sector pair) to get square operators.
    """
    col = _mode_column(basis, mode)
    if basis.n_tot == 1:
        # target sector is the unique vacuum state
        lower = _vacuum_basis(basis.n_sites)
    else:
        lower = enumerate_sector(basis.n_sites, basis.n_tot - 1)

    rows, cols, vals = [], [], []
    for i, state in enumerate(basis.states):
        occ = state.as_tuple()
        n = occ[col]
        if n == 0:
            continue
        target = list(occ)
        target[col] = n - 1
        j = lower.index_of(OccupationState(target[0], tuple(target[1:-1]), target[-1]))
        amp = np.sqrt(n) if col in (0, basis.n_sites + 1) else 1.0
        rows.append(j)
        cols.append(i)
        vals.append(amp)
    return _wrap(basis, rows, cols, vals, codomain=lower)


def _vacuum_basis(n_sites: int) -> SectorBasis:
    # the N_tot = 0 sector; built by hand since enumerate_sector requires N_tot >= 1
    vac = OccupationState(0, (0,) * n_sites, 0)
    return SectorBasis(
        n_sites=n_sites,
        n_tot=0,
        states=(vac,),
        _index={vac.as_tuple(): 0},
        occupations=np.array([vac.as_tuple()], dtype=np.int64),
    )


def _check_match(params: ModelParams, basis: SectorBasis):
    if params.n_sites != basis.n_sites or params.n_tot != basis.n_tot:
        raise BasisMismatchError(
            f"params are for sector ({params.n_sites}, {params.n_tot}) "
            f"but basis is ({basis.n_sites}, {basis.n_tot})"
        )


def coulomb_diagonal(params: ModelParams, basis: SectorBasis) -> np.ndarray:
    """Diagonal Coulomb energies (1/2) sum_{j != j'} U/|j-j'| n_j n_j' per state."""
    _check_match(params, basis)
    sites = basis.occupations[:, 1:-1].astype(np.float64)
    n = basis.n_sites
    diag = np.zeros(basis.dim)
    for j in range(n):
        for k in range(j + 1, n):
            diag += params.u / (k - j) * sites[:, j] * sites[:, k]
    return diag


def build_hamiltonian(params: ModelParams, basis: SectorBasis,
                      jw_string: bool = False) -> SectorOperator:
    """Chain Hamiltonian over the sector: nearest-neighbour hopping plus the
    full 1/|j-j'| Coulomb tail over all site pairs.

    Both hop directions are inserted explicitly with the same float, so
    H == H^T exactly.  ``jw_string`` selects the fermionic-string sign
    convention; for nearest-neighbour hops the string never straddles an
    occupied site, so the Hamiltonian is identical in both conventions (the
    flag is accepted here for interface symmetry with the jump builders).
    """
    _check_match(params, basis)
    del jw_string  # no string can act between adjacent sites
    rows, cols, vals = [], [], []

    amp = -params.hbar * params.c_hop
    for i, state in enumerate(basis.states):
        occ = state.as_tuple()
        for j in range(1, basis.n_sites):
            a, b = occ[j], occ[j + 1]
            if a + b != 1:
                continue
            target = list(occ)
            target[j], target[j + 1] = b, a
            k = basis.index_of(OccupationState(target[0], tuple(target[1:-1]), target[-1]))
            rows.append(k)
            cols.append(i)
            vals.append(amp)

    diag = coulomb_diagonal(params, basis)
    rows.extend(range(basis.dim))
    cols.extend(range(basis.dim))
    vals.extend(diag.tolist())
    return _wrap(basis, rows, cols, vals)


def _string_signs(basis: SectorBasis) -> np.ndarray:
    """(-1)^(n_1 + ... + n_{N-1}) per basis state: the Jordan-Wigner string
    a drain-end annihilation picks up from the sites before it."""
    interior = basis.occupations[:, 1:basis.n_sites]  # sites 1..N-1
    return np.where(interior.sum(axis=1) % 2 == 0, 1.0, -1.0)


def build_jump_source(basis: SectorBasis, jw_string: bool = False) -> SectorOperator:
    """L_s: move one particle source -> site 1 with amplitude sqrt(n_source),
    blocked when site 1 is occupied.  The string for site 1 is empty, so the
    convention flag has no effect here."""
    del jw_string
    rows, cols, vals = [], [], []
    for i, state in enumerate(basis.states):
        if state.n_source == 0 or state.sites[0] == 1:
            continue
        target = (state.n_source - 1, (1,) + state.sites[1:], state.n_drain)
        j = basis.index_of(OccupationState(*target))
        rows.append(j)
        cols.append(i)
        vals.append(np.sqrt(state.n_source))
    return _wrap(basis, rows, cols, vals)


def build_jump_drain(basis: SectorBasis, jw_string: bool = False) -> SectorOperator:
    """L_d: move one particle site N -> drain with amplitude sqrt(n_drain + 1).

    With ``jw_string`` the annihilation at site N carries the fermionic
    string sign over sites 1..N-1.
    """
    signs = _string_signs(basis) if jw_string else np.ones(basis.dim)
    rows, cols, vals = [], [], []
    n = basis.n_sites
    for i, state in enumerate(basis.states):
        if state.sites[-1] == 0:
            continue
        target = (state.n_source, state.sites[:-1] + (0,), state.n_drain + 1)
        j = basis.index_of(OccupationState(*target))
        rows.append(j)
        cols.append(i)
        vals.append(signs[i] * np.sqrt(state.n_drain + 1))
    return _wrap(basis, rows, cols, vals)


def number_operator(basis: SectorBasis, mode) -> SectorOperator:
    """Diagonal occupancy operator for one mode."""
    col = _mode_column(basis, mode)
    diag = basis.occupations[:, col].astype(np.float64)
    idx = list(range(basis.dim))
    return _wrap(basis, idx, idx, diag.tolist())


def total_number_operator(basis: SectorBasis) -> SectorOperator:
    """Sum of all mode occupancies; equals N_tot * identity on the sector."""
    diag = basis.occupations.sum(axis=1).astype(np.float64)
    idx = list(range(basis.dim))
    return _wrap(basis, idx, idx, diag.tolist())


# ---------------------------------------------------------------------------
# Kernel-facing representations


@dataclass(frozen=True)
class JumpMap:
    """A jump operator with at most one nonzero per column, stored as the
    assignment dst[k] <- amp[k] * src[k].  Both jump operators here have this
    shape, which lets the dissipator act by gather/scatter instead of matmul.
    ``k_diag`` is the diagonal of L^dagger L over the full basis."""

    src: np.ndarray
    dst: np.ndarray
    amp: np.ndarray
    k_diag: np.ndarray
    dim: int = field(default=0)

    def to_matrix(self) -> np.ndarray:
        m = np.zeros((self.dim, self.dim))
        m[self.dst, self.src] = self.amp
        return m


def jump_map(op: SectorOperator) -> JumpMap:
    """Extract the single-assignment structure of a number-conserving jump."""
    m = op.toarray()
    dst, src = np.nonzero(m)
    if len(set(src.tolist())) != len(src):
        raise ValueError("operator has more than one nonzero in some column")
    amp = m[dst, src].astype(np.float64)
    k = np.zeros(m.shape[1])
    k[src] = amp * amp  # |amp|^2; string signs square away
    return JumpMap(src=src.astype(np.int64), dst=dst.astype(np.int64),
                   amp=amp, k_diag=k, dim=m.shape[1])


def hamiltonian_csr(h: SectorOperator) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """CSR arrays (data, indices, indptr) of the real symmetric Hamiltonian."""
    m = h.matrix if sp.issparse(h.matrix) else sp.csr_matrix(h.matrix)
    m = m.tocsr()
    return (np.real(m.data).astype(np.float64),
            m.indices.astype(np.int64),
            m.indptr.astype(np.int64))
