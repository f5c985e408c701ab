"""Physical observables extracted from density matrices.

The central quantity is the total chain occupancy n_SF = sum_j <n_j>; the
per-mode populations and the numerical diagnostics (trace residual,
hermiticity drift, smallest eigenvalue) ride along with every sample so that
degraded tails can be rejected in post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BasisMismatchError, ObservableIntegrityError
from .fockspace import SectorBasis
from .operators import ModelParams

__all__ = ["ObservableVector", "measure"]

IMAG_TOL = 1e-10

# smallest-eigenvalue diagnostic cadence (full spectral decomposition is the
# costliest check, so it runs on every k-th sample by default)
EIGEN_EVERY_DEFAULT = 10


@dataclass(frozen=True)
class ObservableVector:
    """Populations and diagnostics at one sample time.

    ``populations`` is ordered [source, site_1 .. site_N, drain].
    ``min_eigenvalue`` and ``hermiticity_residual`` are NaN when the
    corresponding check was skipped for this sample.
    """

    t: float
    tau: float
    populations: np.ndarray
    n_sf: float
    trace_residual: float
    hermiticity_residual: float
    min_eigenvalue: float

    @property
    def n_source(self) -> float:
        return float(self.populations[0])

    @property
    def n_drain(self) -> float:
        return float(self.populations[-1])

    @property
    def site_populations(self) -> np.ndarray:
        return self.populations[1:-1]

    def total(self) -> float:
        return float(self.populations.sum())


def measure(rho, params: ModelParams, *, t: float = 0.0,
            with_eigenvalue: bool = True,
            hermiticity_residual: float | None = None,
            imag_tol: float = IMAG_TOL) -> ObservableVector:
    """Populations <n_mode> = Tr(rho n_mode) plus diagnostics.

    ``rho`` is a DensityMatrix or a plain complex matrix (then its basis is
    taken from ``params``).  All number operators are diagonal in the
    occupation basis, so populations reduce to occupation-weighted sums of
    diag(rho); their imaginary parts must stay below ``imag_tol``.

    ``hermiticity_residual`` lets a propagator report the drift it measured
    before re-symmetrizing; when omitted it is computed from ``rho`` as is.
    """
    basis = getattr(rho, "basis", None)
    matrix = getattr(rho, "matrix", rho)
    if basis is None:
        basis = params.basis()
    if basis.n_sites != params.n_sites or basis.n_tot != params.n_tot:
        raise BasisMismatchError(
            f"density matrix sector ({basis.n_sites}, {basis.n_tot}) does not match "
            f"params ({params.n_sites}, {params.n_tot})"
        )
    if matrix.shape != (basis.dim, basis.dim):
        raise BasisMismatchError(
            f"density matrix shape {matrix.shape} does not match sector dimension {basis.dim}"
        )

    diag = np.diagonal(matrix)
    worst_imag = float(np.max(np.abs(diag.imag))) if basis.dim else 0.0
    if worst_imag > imag_tol:
        raise ObservableIntegrityError(
            f"population imaginary part {worst_imag:.3e} exceeds {imag_tol:.1e} at t={t:g}"
        )

    occ = basis.occupations  # (dim, n_sites + 2)
    populations = occ.T @ diag.real
    n_sf = float(populations[1:-1].sum())

    trace_residual = abs(float(diag.real.sum()) - 1.0)
    if hermiticity_residual is None:
        hermiticity_residual = float(np.max(np.abs(matrix - matrix.conj().T)))
    if with_eigenvalue:
        herm = 0.5 * (matrix + matrix.conj().T)
        min_eigenvalue = float(np.linalg.eigvalsh(herm)[0])
    else:
        min_eigenvalue = float("nan")

    return ObservableVector(
        t=float(t),
        tau=float(t) * params.c_eff,
        populations=populations,
        n_sf=n_sf,
        trace_residual=trace_residual,
        hermiticity_residual=float(hermiticity_residual),
        min_eigenvalue=min_eigenvalue,
    )
