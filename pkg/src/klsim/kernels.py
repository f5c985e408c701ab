"""Hot numeric kernels: master-equation right-hand side and CSR matvec.

Two interchangeable implementations exist for every kernel:

* a numba ``@njit`` version (default when numba imports cleanly), and
* a pure-numpy fallback.

Selection is by the environment variable ``KLSIM_KERNELS``:

    KLSIM_KERNELS=numba   force the jitted kernels (error if numba missing)
    KLSIM_KERNELS=numpy   force the numpy fallback

Unset, numba is used when available.  ``get_kernels(flavor)`` returns either
set explicitly, which is what the equivalence tests and the benchmark use.

The right-hand side computed here is, with K_c = L_c^dagger L_c,

    drho = -(i/hbar) (H rho - rho H)
           + gamma_s (2 L_s rho L_s^dagger - K_s rho - rho K_s)
           + gamma_d (2 L_d rho L_d^dagger - K_d rho - rho K_d)

H is real symmetric in CSR form; the jump operators have one nonzero per
column, so their sandwiches are gather/scatter loops; the K_c are diagonal.
"""

from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

__all__ = ["get_kernels", "active_flavor", "NUMBA_AVAILABLE"]

_ENV_VAR = "KLSIM_KERNELS"

try:
    from numba import njit

    NUMBA_AVAILABLE = True
except ImportError:  # pragma: no cover - exercised only without numba
    NUMBA_AVAILABLE = False


# ---------------------------------------------------------------------------
# numpy reference implementations


def _csr_matvec_numpy(data, indices, indptr, x):
    n = len(indptr) - 1
    y = np.zeros(n, dtype=np.complex128)
    for i in range(n):
        lo, hi = indptr[i], indptr[i + 1]
        if lo != hi:
            y[i] = np.dot(data[lo:hi], x[indices[lo:hi]])
    return y


def _rhs_numpy(rho, h_data, h_indices, h_indptr,
               s_src, s_dst, s_amp, d_src, d_dst, d_amp,
               ks, kd, gamma_s, gamma_d, inv_hbar):
    import scipy.sparse as sp

    n = rho.shape[0]
    h = sp.csr_matrix((h_data, h_indices, h_indptr), shape=(n, n))
    h_rho = h @ rho
    # H real symmetric: rho H = (H rho^T)^T without conjugation
    rho_h = (h @ rho.T).T
    out = (-1j * inv_hbar) * (h_rho - rho_h)
    for gamma, src, dst, amp, k in (
        (gamma_s, s_src, s_dst, s_amp, ks),
        (gamma_d, d_src, d_dst, d_amp, kd),
    ):
        if gamma == 0.0:
            continue
        if len(src):
            sandwich = np.multiply.outer(amp, amp) * rho[np.ix_(src, src)]
            out[np.ix_(dst, dst)] += (2.0 * gamma) * sandwich
        out -= gamma * (k[:, None] + k[None, :]) * rho
    return out


# ---------------------------------------------------------------------------
# numba implementations

if NUMBA_AVAILABLE:

    @njit(cache=True, nogil=True)
    def _csr_matvec_numba(data, indices, indptr, x):
        n = len(indptr) - 1
        y = np.zeros(n, dtype=np.complex128)
        for i in range(n):
            acc = 0.0 + 0.0j
            for p in range(indptr[i], indptr[i + 1]):
                acc += data[p] * x[indices[p]]
            y[i] = acc
        return y

    # The RHS kernel works on interleaved re/im float64 views of the complex
    # matrices: H and the jump amplitudes are real, so every operation is a
    # real scalar times a float pair and the loops vectorize.
    @njit(cache=True, nogil=True, fastmath=True)
    def _rhs_numba_f(rho_f, out_f, h_data, h_indices, h_indptr,
                     s_src, s_dst, s_amp, d_src, d_dst, d_amp,
                     ks, kd, gamma_s, gamma_d, inv_hbar):
        n = rho_f.shape[0]
        n2 = 2 * n
        g = gamma_s * ks + gamma_d * kd
        hrow = np.empty(n2, dtype=np.float64)
        for i in range(n):
            # (H rho) row i, interleaved
            for c in range(n2):
                hrow[c] = 0.0
            for p in range(h_indptr[i], h_indptr[i + 1]):
                k = h_indices[p]
                v = h_data[p]
                for c in range(n2):
                    hrow[c] += v * rho_f[k, c]
            # (rho H)[i, j] gathers within the cached row i (H symmetric)
            gi = g[i]
            for j in range(n):
                re2 = 0.0
                im2 = 0.0
                for p in range(h_indptr[j], h_indptr[j + 1]):
                    kp = 2 * h_indices[p]
                    v = h_data[p]
                    re2 += v * rho_f[i, kp]
                    im2 += v * rho_f[i, kp + 1]
                a = hrow[2 * j] - re2      # Re[H, rho]_ij
                b = hrow[2 * j + 1] - im2  # Im[H, rho]_ij
                gij = gi + g[j]
                # -i/hbar * (a + ib) = (b - ia)/hbar
                out_f[i, 2 * j] = inv_hbar * b - gij * rho_f[i, 2 * j]
                out_f[i, 2 * j + 1] = -inv_hbar * a - gij * rho_f[i, 2 * j + 1]

        # jump sandwiches: 2 gamma amp_a amp_b rho[src_a, src_b] -> [dst_a, dst_b]
        if gamma_s != 0.0:
            two_g = 2.0 * gamma_s
            for a2 in range(len(s_src)):
                ia, ja = s_dst[a2], s_src[a2]
                fa = two_g * s_amp[a2]
                for b2 in range(len(s_src)):
                    f = fa * s_amp[b2]
                    jb = 2 * s_src[b2]
                    ib = 2 * s_dst[b2]
                    out_f[ia, ib] += f * rho_f[ja, jb]
                    out_f[ia, ib + 1] += f * rho_f[ja, jb + 1]
        if gamma_d != 0.0:
            two_g = 2.0 * gamma_d
            for a2 in range(len(d_src)):
                ia, ja = d_dst[a2], d_src[a2]
                fa = two_g * d_amp[a2]
                for b2 in range(len(d_src)):
                    f = fa * d_amp[b2]
                    jb = 2 * d_src[b2]
                    ib = 2 * d_dst[b2]
                    out_f[ia, ib] += f * rho_f[ja, jb]
                    out_f[ia, ib + 1] += f * rho_f[ja, jb + 1]

    def _rhs_numba(rho, h_data, h_indices, h_indptr,
                   s_src, s_dst, s_amp, d_src, d_dst, d_amp,
                   ks, kd, gamma_s, gamma_d, inv_hbar):
        n = rho.shape[0]
        rho = np.ascontiguousarray(rho, dtype=np.complex128)
        out = np.empty((n, n), dtype=np.complex128)
        _rhs_numba_f(rho.view(np.float64), out.view(np.float64),
                     h_data, h_indices, h_indptr,
                     s_src, s_dst, s_amp, d_src, d_dst, d_amp,
                     ks, kd, gamma_s, gamma_d, inv_hbar)
        return out


# ---------------------------------------------------------------------------
# dispatch

_NUMPY_SET = SimpleNamespace(
    flavor="numpy",
    csr_matvec=_csr_matvec_numpy,
    lindblad_rhs=_rhs_numpy,
)

if NUMBA_AVAILABLE:
    _NUMBA_SET = SimpleNamespace(
        flavor="numba",
        csr_matvec=_csr_matvec_numba,
        lindblad_rhs=_rhs_numba,
    )


def get_kernels(flavor: str | None = None) -> SimpleNamespace:
    """Kernel set for ``flavor`` ('numba' | 'numpy'); default from the
    KLSIM_KERNELS env var, falling back to numba when importable."""
    if flavor is None:
        flavor = os.environ.get(_ENV_VAR, "").strip().lower() or None
    if flavor is None:
        flavor = "numba" if NUMBA_AVAILABLE else "numpy"
    if flavor == "numpy":
        return _NUMPY_SET
    if flavor == "numba":
        if not NUMBA_AVAILABLE:
            raise RuntimeError(
                f"{_ENV_VAR}=numba requested but numba is not importable"
            )
        return _NUMBA_SET
    raise ValueError(f"unknown kernel flavor {flavor!r} (use 'numba' or 'numpy')")


def active_flavor() -> str:
    return get_kernels().flavor
