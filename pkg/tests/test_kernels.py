"""Kernel equivalence: jitted and numpy paths must agree bit-for-bit-ish."""

import numpy as np
import pytest
import scipy.sparse as sp

from klsim.evolution import build_lindblad_ops, dense_liouvillian, lindblad_rhs
from klsim.kernels import NUMBA_AVAILABLE, active_flavor, get_kernels
from klsim.operators import ModelParams

from conftest import random_density

needs_numba = pytest.mark.skipif(not NUMBA_AVAILABLE, reason="numba not importable")


def _rhs_args(params, ops, rho):
    s, d = ops.source_map, ops.drain_map
    return (rho, ops.h_data, ops.h_indices, ops.h_indptr,
            s.src, s.dst, s.amp, d.src, d.dst, d.amp,
            s.k_diag, d.k_diag, params.gamma_s, params.gamma_d, 1.0 / params.hbar)


@pytest.fixture(scope="module")
def setup52():
    params = ModelParams.matched_rates(n_tot=2, u=10.0)
    ops = build_lindblad_ops(params)
    return params, ops


def test_csr_matvec_matches_scipy(setup52):
    _, ops = setup52
    d = ops.basis.dim
    h = sp.csr_matrix((ops.h_data, ops.h_indices, ops.h_indptr), shape=(d, d))
    rng = np.random.default_rng(3)
    x = rng.standard_normal(d) + 1j * rng.standard_normal(d)
    for flavor in ("numpy",) + (("numba",) if NUMBA_AVAILABLE else ()):
        y = get_kernels(flavor).csr_matvec(ops.h_data, ops.h_indices, ops.h_indptr, x)
        np.testing.assert_allclose(y, h @ x, rtol=0, atol=1e-13)


@needs_numba
def test_rhs_flavors_agree(setup52):
    params, ops = setup52
    rho = random_density(ops.basis, seed=7).matrix
    out_np = get_kernels("numpy").lindblad_rhs(*_rhs_args(params, ops, rho))
    out_nb = get_kernels("numba").lindblad_rhs(*_rhs_args(params, ops, rho))
    assert np.max(np.abs(out_np - out_nb)) <= 1e-14


@pytest.mark.parametrize("flavor", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_rhs_matches_dense_liouvillian(setup52, flavor):
    # dual route: the same generator assembled as a dense superoperator
    params, ops = setup52
    liou = dense_liouvillian(params, ops=ops)
    rho = random_density(ops.basis, seed=11).matrix
    d = ops.basis.dim
    expected = (liou @ rho.reshape(-1)).reshape(d, d)
    got = get_kernels(flavor).lindblad_rhs(*_rhs_args(params, ops, rho))
    np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("flavor", ["numpy", pytest.param("numba", marks=needs_numba)])
def test_rhs_preserves_trace_and_hermiticity(setup52, flavor):
    params, ops = setup52
    rho = random_density(ops.basis, seed=23).matrix
    out = get_kernels(flavor).lindblad_rhs(*_rhs_args(params, ops, rho))
    assert abs(np.trace(out)) <= 1e-13
    assert np.max(np.abs(out - out.conj().T)) <= 1e-13


def test_lindblad_rhs_wrapper_accepts_density(setup52):
    params, ops = setup52
    rho = random_density(ops.basis, seed=5)
    out = lindblad_rhs(rho, params, ops=ops)
    out2 = lindblad_rhs(rho.matrix, params, ops=ops)
    np.testing.assert_array_equal(out, out2)


def test_flavor_selection(monkeypatch):
    assert get_kernels("numpy").flavor == "numpy"
    monkeypatch.setenv("KLSIM_KERNELS", "numpy")
    assert get_kernels().flavor == "numpy"
    assert active_flavor() == "numpy"
    monkeypatch.delenv("KLSIM_KERNELS")
    assert active_flavor() in ("numba", "numpy")
    with pytest.raises(ValueError):
        get_kernels("fortran")


@needs_numba
def test_env_var_selects_numba(monkeypatch):
    monkeypatch.setenv("KLSIM_KERNELS", "numba")
    assert get_kernels().flavor == "numba"
