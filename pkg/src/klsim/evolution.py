"""Master-equation propagation.

Three interchangeable backends integrate d(rho)/dt = L[rho] over one number
sector:

``krylov-exponential``
    Arnoldi approximation of exp(tau*L) acting on vec(rho) with an a
    posteriori residual estimate and adaptive sub-stepping.  Default; the
    only backend that stays practical for the larger sectors.
``adaptive-explicit``
    Embedded Dormand-Prince 5(4) on the matrix ODE.  Cross-check backend.
``dense-exponential``
    Eigendecomposition of the full Liouvillian matrix (with an expm-chain
    fallback when the eigenbasis is ill-conditioned or defective).  Refuses
    sectors above ``dense_cap``; oracle for small problems.

rho is vectorized row-major, so vec(A rho B) = (A kron B^T) vec(rho).
"""

from __future__ import annotations

import logging
import os
import struct
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.sparse as sp

from . import observables
from .errors import (BasisMismatchError, DimensionCapError, IntegrationError,
                     InvariantViolationError)
from .fockspace import SectorBasis, enumerate_sector
from .kernels import get_kernels
from .operators import (JumpMap, ModelParams, SectorOperator,
                        build_hamiltonian, build_jump_drain,
                        build_jump_source, hamiltonian_csr, jump_map)

logger = logging.getLogger("klsim.evolution")

__all__ = [
    "BACKENDS", "DENSE_DIM_CAP", "CHECKPOINT_MAGIC",
    "DensityMatrix", "EvolutionConfig", "LindbladOperators", "TimeSeries",
    "build_lindblad_ops", "initial_state", "lindblad_rhs",
    "dense_liouvillian", "log_time_grid", "propagate",
    "save_checkpoint", "load_checkpoint",
]

BACKENDS = ("krylov-exponential", "adaptive-explicit", "dense-exponential")
DENSE_DIM_CAP = 64
CHECKPOINT_MAGIC = b"KLSIM1\n"

# default density-matrix invariant tolerances
TRACE_TOL = 1e-8
HERM_TOL = 1e-10
PSD_TOL = 1e-8


@dataclass
class DensityMatrix:
    """A density matrix tied to its occupation basis."""

    basis: SectorBasis
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.complex128)
        if self.matrix.shape != (self.basis.dim, self.basis.dim):
            raise BasisMismatchError(
                f"matrix shape {self.matrix.shape} does not match sector dimension {self.basis.dim}"
            )

    def trace(self) -> complex:
        return complex(np.trace(self.matrix))

    def trace_residual(self) -> float:
        return abs(self.trace() - 1.0)

    def hermiticity_residual(self) -> float:
        return float(np.max(np.abs(self.matrix - self.matrix.conj().T)))

    def min_eigenvalue(self) -> float:
        herm = 0.5 * (self.matrix + self.matrix.conj().T)
        return float(np.linalg.eigvalsh(herm)[0])

    def purity(self) -> float:
        return float(np.vdot(self.matrix, self.matrix.conj().T).real)

    def copy(self) -> "DensityMatrix":
        return DensityMatrix(self.basis, self.matrix.copy())

    def validate(self, trace_tol: float = TRACE_TOL, herm_tol: float = HERM_TOL,
                 psd_tol: float = PSD_TOL) -> None:
        """Raise ValueError if any density-matrix invariant is violated."""
        tr = self.trace_residual()
        if tr > trace_tol:
            raise ValueError(f"trace residual {tr:.3e} exceeds {trace_tol:.1e}")
        he = self.hermiticity_residual()
        if he > herm_tol:
            raise ValueError(f"hermiticity residual {he:.3e} exceeds {herm_tol:.1e}")
        ev = self.min_eigenvalue()
        if ev < -psd_tol:
            raise ValueError(f"smallest eigenvalue {ev:.3e} below -{psd_tol:.1e}")


def initial_state(basis: SectorBasis) -> DensityMatrix:
    """Pure state with every particle in the source reservoir."""
    rho = np.zeros((basis.dim, basis.dim), dtype=np.complex128)
    i0 = basis.initial_index()
    rho[i0, i0] = 1.0
    return DensityMatrix(basis, rho)


@dataclass(frozen=True)
class LindbladOperators:
    """Prebuilt operator set for one (params, string-convention) pair."""

    basis: SectorBasis
    hamiltonian: SectorOperator
    jump_source: SectorOperator
    jump_drain: SectorOperator
    h_data: np.ndarray
    h_indices: np.ndarray
    h_indptr: np.ndarray
    source_map: JumpMap
    drain_map: JumpMap
    jw_string: bool


def build_lindblad_ops(params: ModelParams, basis: SectorBasis | None = None,
                       jw_string: bool = False) -> LindbladOperators:
    if basis is None:
        basis = params.basis()
    h = build_hamiltonian(params, basis)
    ls = build_jump_source(basis)
    ld = build_jump_drain(basis, jw_string=jw_string)
    h_data, h_indices, h_indptr = hamiltonian_csr(h)
    return LindbladOperators(
        basis=basis, hamiltonian=h, jump_source=ls, jump_drain=ld,
        h_data=h_data, h_indices=h_indices, h_indptr=h_indptr,
        source_map=jump_map(ls), drain_map=jump_map(ld),
        jw_string=jw_string,
    )


def lindblad_rhs(rho, params: ModelParams, ops: LindbladOperators | None = None,
                 kernels=None) -> np.ndarray:
    """d(rho)/dt for a single density matrix (or stacked vec input)."""
    matrix = getattr(rho, "matrix", rho)
    if ops is None:
        ops = build_lindblad_ops(params)
    dim = ops.basis.dim
    if matrix.shape != (dim, dim):
        raise BasisMismatchError(
            f"rho shape {matrix.shape} does not match sector dimension {dim}"
        )
    if kernels is None:
        kernels = get_kernels()
    matrix = np.ascontiguousarray(matrix, dtype=np.complex128)
    sm, dm = ops.source_map, ops.drain_map
    return kernels.lindblad_rhs(
        matrix, ops.h_data, ops.h_indices, ops.h_indptr,
        sm.src, sm.dst, sm.amp, dm.src, dm.dst, dm.amp,
        sm.k_diag, dm.k_diag,
        params.gamma_s, params.gamma_d, 1.0 / params.hbar,
    )


def dense_liouvillian(params: ModelParams, basis: SectorBasis | None = None,
                      ops: LindbladOperators | None = None,
                      cap: int = DENSE_DIM_CAP) -> np.ndarray:
    """Full (dim^2 x dim^2) generator matrix; refuses sectors above ``cap``.

    Memory and expm cost grow as dim^4 and dim^6, hence the hard cap."""
    if ops is None:
        ops = build_lindblad_ops(params, basis)
    basis = ops.basis
    if basis.dim > cap:
        raise DimensionCapError(
            f"sector dimension {basis.dim} exceeds the dense-exponential cap {cap}"
        )
    d = basis.dim
    eye = sp.identity(d, format="csr")
    h = sp.csr_matrix(ops.hamiltonian.toarray())
    liou = (-1j / params.hbar) * (sp.kron(h, eye) - sp.kron(eye, h.T))
    for op, gamma in ((ops.jump_source, params.gamma_s),
                      (ops.jump_drain, params.gamma_d)):
        if gamma == 0.0:
            continue
        l = sp.csr_matrix(op.toarray())
        k = (l.conj().T @ l).tocsr()
        liou = liou + gamma * (2.0 * sp.kron(l, l.conj())
                               - sp.kron(k, eye) - sp.kron(eye, k.T))
    return np.asarray(liou.todense(), dtype=np.complex128)


def log_time_grid(t_max: float, n: int = 200, decades: float = 4.0) -> np.ndarray:
    """t=0 followed by n-1 log-spaced samples ending exactly at t_max."""
    if t_max <= 0:
        raise ValueError("t_max must be positive")
    if n < 2:
        raise ValueError("need at least two grid points")
    back = np.logspace(np.log10(t_max) - decades, np.log10(t_max), n - 1)
    back[-1] = t_max
    return np.concatenate(([0.0], back))


@dataclass(frozen=True)
class EvolutionConfig:
    t_max: float
    backend: str = "krylov-exponential"
    rel_tol: float = 1e-9
    abs_tol: float = 1e-12
    output_grid: np.ndarray | None = None
    krylov_dim: int = 30
    dense_cap: int = DENSE_DIM_CAP
    store_states: bool = False
    eigen_every: int = observables.EIGEN_EVERY_DEFAULT
    trace_tol: float = TRACE_TOL
    herm_tol: float = HERM_TOL
    psd_tol: float = PSD_TOL
    imag_tol: float = observables.IMAG_TOL

    def __post_init__(self):
        if self.t_max <= 0:
            raise ValueError("t_max must be positive")
        if self.backend not in BACKENDS:
            raise ValueError(f"unknown backend {self.backend!r}; expected one of {BACKENDS}")
        if self.rel_tol <= 0 or self.abs_tol <= 0:
            raise ValueError("tolerances must be positive")
        if self.krylov_dim < 2:
            raise ValueError("krylov_dim must be at least 2")
        if self.eigen_every < 1:
            raise ValueError("eigen_every must be at least 1")
        if self.output_grid is not None:
            grid = np.asarray(self.output_grid, dtype=float)
            if grid.ndim != 1 or grid.size < 1:
                raise ValueError("output_grid must be a 1-d array of times")
            if np.any(np.diff(grid) <= 0):
                raise ValueError("output_grid must be strictly increasing")
            if grid[0] < 0 or grid[-1] > self.t_max * (1 + 1e-12):
                raise ValueError("output_grid must lie within [0, t_max]")
            object.__setattr__(self, "output_grid", grid)

    def grid(self) -> np.ndarray:
        if self.output_grid is not None:
            return self.output_grid
        return log_time_grid(self.t_max)


@dataclass
class TimeSeries:
    """Propagation output: observables on the sample grid plus diagnostics."""

    params: ModelParams
    t: np.ndarray
    tau: np.ndarray
    observables: list
    states: list | None
    diagnostics: dict
    final_state: DensityMatrix

    @property
    def n_sf(self) -> np.ndarray:
        return np.array([o.n_sf for o in self.observables])

    @property
    def populations(self) -> np.ndarray:
        return np.vstack([o.populations for o in self.observables])

    def population(self, column: int) -> np.ndarray:
        return self.populations[:, column]


def _norm_bound(params: ModelParams, ops: LindbladOperators) -> float:
    """Cheap upper bound on the Liouvillian operator norm (step-size seeding)."""
    h_rowsum = 0.0
    indptr, data = ops.h_indptr, ops.h_data
    for i in range(len(indptr) - 1):
        h_rowsum = max(h_rowsum, float(np.sum(np.abs(data[indptr[i]:indptr[i + 1]]))))
    bound = 2.0 * h_rowsum / params.hbar
    bound += 4.0 * params.gamma_s * float(ops.source_map.k_diag.max(initial=0.0))
    bound += 4.0 * params.gamma_d * float(ops.drain_map.k_diag.max(initial=0.0))
    return max(bound, 1e-30)


# ---------------------------------------------------------------------------
# Krylov-exponential backend (Arnoldi + small-matrix expm, adaptive substeps)
# ---------------------------------------------------------------------------

def _arnoldi(matvec, v, beta, m, htol):
    """Arnoldi with classical Gram-Schmidt and selective reorthogonalization
    (second pass only when the projection removed most of the vector).

    Returns (V, Hh, k, happy) where k <= m is the subspace size actually
    built and happy=True flags an invariant subspace (exact propagation)."""
    n = v.size
    V = np.empty((m + 1, n), dtype=np.complex128)
    Hh = np.zeros((m + 2, m), dtype=np.complex128)
    V[0] = v / beta
    for j in range(m):
        w = matvec(V[j])
        nw0 = np.linalg.norm(w)
        # <v_i, w> = conj(V_i) . w, computed as conj(V @ conj(w)) so only the
        # small vector is conjugated, never the (j+1, n) basis block
        c1 = np.conj(V[:j + 1] @ np.conj(w))
        w -= V[:j + 1].T @ c1
        hj1 = np.linalg.norm(w)
        if hj1 < 0.5 * nw0:
            c2 = np.conj(V[:j + 1] @ np.conj(w))
            w -= V[:j + 1].T @ c2
            c1 += c2
            hj1 = np.linalg.norm(w)
        Hh[:j + 1, j] = c1
        Hh[j + 1, j] = hj1
        if hj1 <= htol:
            return V, Hh, j + 1, True
        V[j + 1] = w / hj1
    return V, Hh, m, False


def _krylov_expm(Hh, k, tau, happy):
    """exp(tau * H_k) worked out on the (k+2)-augmented matrix.

    The two trailing rows integrate the h_{k+1,k} leakage once and twice,
    giving the phi_1/phi_2 coefficients used for the local error estimate."""
    if happy:
        return scipy.linalg.expm(tau * Hh[:k, :k]), 0.0, 0.0
    ha = np.zeros((k + 2, k + 2), dtype=np.complex128)
    ha[:k, :k] = Hh[:k, :k]
    ha[k, k - 1] = Hh[k, k - 1]
    ha[k + 1, k] = 1.0
    f = scipy.linalg.expm(tau * ha)
    return f, abs(f[k, 0]), abs(f[k + 1, 0])


def _krylov_eval(V, Hh, k, beta, s, happy):
    f, _, _ = _krylov_expm(Hh, k, s, happy)
    w = V[:k].T @ (beta * f[:k, 0])
    if not happy:
        # corrected scheme: include the first vector outside the subspace
        w += (beta * f[k, 0]) * V[k]
    return w


def _krylov_samples(matvec, v0, grid, t_max, tol_t, m_max, anorm, diag):
    n = v0.size
    d = int(round(np.sqrt(n)))
    m = min(m_max, n)
    htol = 1e-12 * anorm
    tiny = 1e-12 * t_max

    idx = 0
    if grid[idx] == 0.0:
        yield 0.0, v0.reshape(d, d).copy()
        idx += 1

    t = 0.0
    v = v0.copy()
    tau = min(t_max, max(1e-8 * t_max, 0.1 * m / anorm))
    while idx < len(grid):
        tau = min(tau, t_max - t)
        beta = float(np.linalg.norm(v))
        if beta == 0.0:
            raise IntegrationError("state vector collapsed to zero", t_reached=t)
        V, Hh, k, happy = _arnoldi(matvec, v, beta, m, htol)
        diag["matvecs"] += k
        if happy:
            tau = t_max - t
            avnorm = 0.0
        else:
            avnorm = float(np.linalg.norm(matvec(V[k])))
            diag["matvecs"] += 1

        rejects = 0
        while True:
            f, p1, p2 = _krylov_expm(Hh, k, tau, happy)
            if happy:
                err_loc, xm = 0.0, 1.0 / k
                break
            p1 *= beta
            p2 *= beta * avnorm
            if p1 > 10.0 * p2:
                err_loc, xm = p2, 1.0 / k
            elif p1 > p2:
                err_loc, xm = p1 * p2 / (p1 - p2), 1.0 / k
            else:
                err_loc, xm = p1, 1.0 / max(k - 1, 1)
            if err_loc <= tol_t * tau:
                break
            rejects += 1
            diag["steps_rejected"] += 1
            tau *= min(0.9, max(0.2, 0.9 * (tol_t * tau / err_loc) ** xm))
            if rejects > 60 or tau < 1e-14 * t_max:
                raise IntegrationError(
                    f"krylov step size underflow ({tau:.3e}) after {rejects} rejections",
                    t_reached=t,
                )

        diag["steps_accepted"] += 1
        while idx < len(grid) and grid[idx] <= t + tau + tiny:
            s = max(grid[idx] - t, 0.0)
            ws = _krylov_eval(V, Hh, k, beta, s, happy)
            yield grid[idx], ws.reshape(d, d)
            idx += 1
        if idx >= len(grid):
            return

        w = V[:k].T @ (beta * f[:k, 0])
        if not happy:
            w += (beta * f[k, 0]) * V[k]
        rho = w.reshape(d, d)
        presym = float(np.max(np.abs(rho - rho.conj().T)))
        diag["max_presym_residual"] = max(diag["max_presym_residual"], presym)
        rho = 0.5 * (rho + rho.conj().T)
        v = rho.reshape(n)
        t += tau
        if err_loc > 0.0:
            tau *= min(5.0, max(0.2, 0.9 * (tol_t * tau / err_loc) ** xm))
        else:
            tau *= 5.0


# ---------------------------------------------------------------------------
# Adaptive-explicit backend (embedded Dormand-Prince 5(4) on the matrix ODE)
# ---------------------------------------------------------------------------

_DP_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
# fifth-order weights minus the embedded fourth-order ones
_DP_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920,
                  -17253 / 339200, 22 / 525, -1 / 40])


def _rms(x, scale):
    return float(np.sqrt(np.mean((np.abs(x) / scale) ** 2)))


def _rk_initial_step(y0, f0, rhs, rtol, atol, t_max, diag):
    scale = atol + rtol * np.abs(y0)
    d0 = _rms(y0, scale)
    d1 = _rms(f0, scale)
    h0 = 1e-6 * t_max if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    f1 = rhs(y0 + h0 * f0)
    diag["rhs_evals"] += 1
    d2 = _rms(f1 - f0, scale) / h0
    dm = max(d1, d2)
    h1 = (0.01 / dm) ** 0.2 if dm > 1e-15 else max(1e-6 * t_max, h0 * 1e-3)
    return min(100 * h0, h1, t_max)


def _rk_samples(rhs, rho0, grid, t_max, rtol, atol, diag):
    idx = 0
    if grid[idx] == 0.0:
        yield 0.0, rho0.copy()
        idx += 1

    t = 0.0
    y = rho0.copy()
    f0 = rhs(y)
    diag["rhs_evals"] += 1
    h = _rk_initial_step(y, f0, rhs, rtol, atol, t_max, diag)
    k = [None] * 7
    while idx < len(grid):
        h = min(h, grid[idx] - t)
        k[0] = rhs(y)
        for i in range(1, 7):
            yi = y + h * sum(a * k[j] for j, a in enumerate(_DP_A[i]) if a != 0.0)
            k[i] = rhs(yi)
        diag["rhs_evals"] += 7
        y5 = y + h * sum(b * k[i] for i, b in enumerate(_DP_B5) if b != 0.0)
        err = h * sum(e * k[i] for i, e in enumerate(_DP_E) if e != 0.0)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y5))
        errnorm = _rms(err, scale)
        if errnorm <= 1.0:
            diag["steps_accepted"] += 1
            t += h
            if abs(t - grid[idx]) <= 1e-12 * max(t, 1.0):
                yield grid[idx], y5.copy()
                idx += 1
            presym = float(np.max(np.abs(y5 - y5.conj().T)))
            diag["max_presym_residual"] = max(diag["max_presym_residual"], presym)
            y = 0.5 * (y5 + y5.conj().T)
            factor = 5.0 if errnorm == 0.0 else min(5.0, max(0.2, 0.9 * errnorm ** -0.2))
        else:
            diag["steps_rejected"] += 1
            factor = min(1.0, max(0.2, 0.9 * errnorm ** -0.2))
        h *= factor
        if h < 1e-14 * max(t, t_max * 1e-6):
            raise IntegrationError(f"explicit step size underflow ({h:.3e})",
                                   t_reached=t)


# ---------------------------------------------------------------------------
# Dense-exponential backend (spectral propagation with expm-chain fallback)
# ---------------------------------------------------------------------------

# eigenbasis condition number above which spectral propagation is abandoned
# (reconstruction error ~ eps * cond would start eating into the 1e-10
# hermiticity budget)
DENSE_COND_LIMIT = 1e5


def _dense_samples(liou, v0, grid, d, diag):
    lam, w = np.linalg.eig(liou)
    cond = float(np.linalg.cond(w))
    diag["dense_eig_cond"] = cond
    if np.isfinite(cond) and cond < DENSE_COND_LIMIT:
        diag["dense_path"] = "eig"
        c0 = np.linalg.solve(w, v0)
        for t in grid:
            vt = w @ (np.exp(lam * t) * c0)
            yield t, vt.reshape(d, d)
        return
    # defective or badly conditioned eigenbasis: chain scaled expm factors
    # (propagators are cached per distinct gap, so uniform grids cost one expm)
    diag["dense_path"] = "expm-chain"
    v = v0.copy()
    t_prev = 0.0
    cache = {}
    for t in grid:
        dt = t - t_prev
        if dt > 0.0:
            if dt not in cache:
                cache[dt] = scipy.linalg.expm(liou * dt)
            v = cache[dt] @ v
        t_prev = t
        yield t, v.reshape(d, d)


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def propagate(rho0: DensityMatrix, params: ModelParams, config: EvolutionConfig,
              ops: LindbladOperators | None = None) -> TimeSeries:
    """Integrate the master equation and sample observables on a time grid.

    The initial state must satisfy the density-matrix invariants; during the
    run each sampled state is re-checked and a drift beyond 10x the stated
    tolerance aborts with InvariantViolationError (t_reached tells how far
    the integration got).
    """
    if ops is None:
        ops = build_lindblad_ops(params)
    basis = ops.basis
    if rho0.basis != basis:
        raise BasisMismatchError(
            f"initial state sector ({rho0.basis.n_sites}, {rho0.basis.n_tot}) does not "
            f"match operators ({basis.n_sites}, {basis.n_tot})"
        )
    rho0.validate(config.trace_tol, config.herm_tol, config.psd_tol)

    grid = config.grid()
    kernels = get_kernels()
    diag = {
        "backend": config.backend,
        "kernel_flavor": kernels.flavor,
        "matvecs": 0,
        "rhs_evals": 0,
        "steps_accepted": 0,
        "steps_rejected": 0,
        "max_presym_residual": 0.0,
    }

    sm, dm = ops.source_map, ops.drain_map
    inv_hbar = 1.0 / params.hbar

    def rhs_matrix(mat):
        return kernels.lindblad_rhs(
            mat, ops.h_data, ops.h_indices, ops.h_indptr,
            sm.src, sm.dst, sm.amp, dm.src, dm.dst, dm.amp,
            sm.k_diag, dm.k_diag, params.gamma_s, params.gamma_d, inv_hbar,
        )

    if config.backend == "krylov-exponential":
        d = basis.dim

        def matvec(x):
            return rhs_matrix(np.ascontiguousarray(x.reshape(d, d))).reshape(d * d)

        v0 = rho0.matrix.reshape(d * d).astype(np.complex128)
        beta0 = float(np.linalg.norm(v0))
        tol_t = max(config.rel_tol * beta0, config.abs_tol) / config.t_max
        anorm = _norm_bound(params, ops)
        diag["norm_bound"] = anorm
        samples = _krylov_samples(matvec, v0, grid, config.t_max, tol_t,
                                  config.krylov_dim, anorm, diag)
    elif config.backend == "adaptive-explicit":
        samples = _rk_samples(rhs_matrix, rho0.matrix, grid, config.t_max,
                              config.rel_tol, config.abs_tol, diag)
    else:
        liou = dense_liouvillian(params, basis, ops=ops, cap=config.dense_cap)
        v0 = rho0.matrix.reshape(basis.dim * basis.dim).astype(np.complex128)
        samples = _dense_samples(liou, v0, grid, basis.dim, diag)

    obs = []
    states = [] if config.store_states else None
    last = rho0.matrix
    for i, (t, raw) in enumerate(samples):
        presym = float(np.max(np.abs(raw - raw.conj().T)))
        rho_s = 0.5 * (raw + raw.conj().T)
        with_eig = (i % config.eigen_every == 0) or (i == len(grid) - 1)
        ob = observables.measure(
            DensityMatrix(basis, rho_s), params, t=t,
            with_eigenvalue=with_eig, hermiticity_residual=presym,
            imag_tol=config.imag_tol,
        )
        if presym > 10.0 * config.herm_tol:
            raise InvariantViolationError(
                f"hermiticity residual {presym:.3e} exceeds 10x{config.herm_tol:.1e}",
                t_reached=t,
            )
        if ob.trace_residual > 10.0 * config.trace_tol:
            raise InvariantViolationError(
                f"trace residual {ob.trace_residual:.3e} exceeds 10x{config.trace_tol:.1e}",
                t_reached=t,
            )
        if with_eig and ob.min_eigenvalue < -10.0 * config.psd_tol:
            raise InvariantViolationError(
                f"smallest eigenvalue {ob.min_eigenvalue:.3e} below -10x{config.psd_tol:.1e}",
                t_reached=t,
            )
        obs.append(ob)
        if states is not None:
            states.append(DensityMatrix(basis, rho_s.copy()))
        last = rho_s

    logger.debug(
        "%s done: %d accepted / %d rejected steps, %d matvecs, %d rhs evals",
        config.backend, diag["steps_accepted"], diag["steps_rejected"],
        diag["matvecs"], diag["rhs_evals"],
    )
    t_arr = np.array([o.t for o in obs])
    return TimeSeries(
        params=params, t=t_arr, tau=t_arr * params.c_eff, observables=obs,
        states=states, diagnostics=diag,
        final_state=DensityMatrix(basis, np.ascontiguousarray(last)),
    )


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_HEADER = struct.Struct("<qqqd")  # n_sites, n_tot, dim, t


def save_checkpoint(path, rho: DensityMatrix, t: float) -> None:
    """Write a KLSIM1 checkpoint atomically (temp file + rename)."""
    basis = rho.basis
    payload = (CHECKPOINT_MAGIC
               + _CKPT_HEADER.pack(basis.n_sites, basis.n_tot, basis.dim, float(t))
               + np.ascontiguousarray(rho.matrix, dtype=np.complex128).tobytes())
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[DensityMatrix, float]:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a KLSIM1 checkpoint")
        n_sites, n_tot, dim, t = _CKPT_HEADER.unpack(fh.read(_CKPT_HEADER.size))
        basis = enumerate_sector(int(n_sites), int(n_tot))
        if basis.dim != dim:
            raise ValueError(
                f"{path}: header dimension {dim} does not match sector "
                f"({n_sites}, {n_tot}) dimension {basis.dim}"
            )
        data = fh.read(dim * dim * 16)
        if len(data) != dim * dim * 16:
            raise ValueError(f"{path}: truncated checkpoint payload")
        matrix = np.frombuffer(data, dtype=np.complex128).reshape(dim, dim).copy()
    return DensityMatrix(basis, matrix), float(t)
