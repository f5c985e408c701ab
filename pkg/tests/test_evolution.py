"""Propagator backends, invariant enforcement, checkpoints, time grids."""

import numpy as np
import pytest

from klsim.errors import (
    BasisMismatchError,
    DimensionCapError,
    InvariantViolationError,
)
from klsim.evolution import (
    BACKENDS,
    CHECKPOINT_MAGIC,
    DensityMatrix,
    EvolutionConfig,
    dense_liouvillian,
    initial_state,
    load_checkpoint,
    log_time_grid,
    propagate,
    save_checkpoint,
)
from klsim.fockspace import enumerate_sector
from klsim.operators import ModelParams

from conftest import random_density


# ---------------------------------------------------------------------------
# Single-site cascade: the master equation reduces to classical rate
# equations (H = 0, no coherences develop from a diagonal start), solvable in
# closed form.  a = 2*gamma_s and b = 2*gamma_d are the jump rates.
# ---------------------------------------------------------------------------

def cascade_oracle(t, gamma_s, gamma_d):
    t = np.asarray(t, dtype=float)
    a, b = 2.0 * gamma_s, 2.0 * gamma_d
    p_src = np.exp(-a * t)
    if a == b:
        p_site = a * t * np.exp(-a * t)
    else:
        p_site = (a / (b - a)) * (np.exp(-a * t) - np.exp(-b * t))
    return np.column_stack([p_src, p_site, 1.0 - p_src - p_site])


def run_single_site(backend, gamma_s, gamma_d, t_max=40.0, n=21):
    params = ModelParams(n_tot=1, u=10.0, n_sites=1,
                         gamma_s=gamma_s, gamma_d=gamma_d)
    basis = enumerate_sector(1, 1)
    grid = np.linspace(0.0, t_max, n)
    cfg = EvolutionConfig(t_max=t_max, backend=backend, output_grid=grid,
                          eigen_every=1)
    return grid, propagate(initial_state(basis), params, cfg)


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_site_equal_rates(backend):
    grid, ts = run_single_site(backend, 0.05, 0.05)
    expected = cascade_oracle(grid, 0.05, 0.05)
    assert np.max(np.abs(ts.populations - expected)) <= 1e-8


@pytest.mark.parametrize("backend", BACKENDS)
def test_single_site_unequal_rates(backend):
    grid, ts = run_single_site(backend, 0.03, 0.07)
    expected = cascade_oracle(grid, 0.03, 0.07)
    assert np.max(np.abs(ts.populations - expected)) <= 1e-8


def test_happy_breakdown_is_exact():
    # dim(1,1) = 3 so the 9-dimensional Liouvillian fits inside the Krylov
    # space: Arnoldi terminates early and a single exact step covers t_max
    grid, ts = run_single_site("krylov-exponential", 0.05, 0.05)
    assert ts.diagnostics["steps_accepted"] == 1
    assert ts.diagnostics["steps_rejected"] == 0
    expected = cascade_oracle(grid, 0.05, 0.05)
    assert np.max(np.abs(ts.populations - expected)) <= 1e-12


# ---------------------------------------------------------------------------
# Cross-backend agreement and invariants on an interacting sector
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def quick_runs():
    params = ModelParams.matched_rates(n_tot=2, u=10.0)
    basis = enumerate_sector(5, 2)
    tau_grid = np.linspace(0.0, 5.0, 21)
    t_grid = tau_grid / params.c_eff
    out = {}
    for backend in BACKENDS:
        cfg = EvolutionConfig(t_max=t_grid[-1], backend=backend,
                              output_grid=t_grid, eigen_every=1)
        out[backend] = propagate(initial_state(basis), params, cfg)
    return out


def test_backends_cross_agree(quick_runs):
    series = list(quick_runs.values())
    for other in series[1:]:
        diff = np.max(np.abs(series[0].populations - other.populations))
        assert diff <= 1e-6


def test_invariants_along_run(quick_runs):
    for ts in quick_runs.values():
        for ob in ts.observables:
            assert ob.trace_residual <= 1e-8
            assert ob.hermiticity_residual <= 1e-10
            assert ob.min_eigenvalue >= -1e-8
            assert abs(ob.total() - 2.0) <= 1e-8


def test_sample_times_hit_grid_exactly(quick_runs):
    params = ModelParams.matched_rates(n_tot=2, u=10.0)
    t_grid = np.linspace(0.0, 5.0, 21) / params.c_eff
    for ts in quick_runs.values():
        assert np.array_equal(ts.t, t_grid)


def test_final_state_continuation(quick_runs):
    # restarting from final_state must reproduce the one-shot trajectory
    params = ModelParams.matched_rates(n_tot=2, u=10.0)
    basis = enumerate_sector(5, 2)
    tau_grid = np.linspace(0.0, 5.0, 21)
    t_grid = tau_grid / params.c_eff
    t_half = t_grid[10]
    cfg1 = EvolutionConfig(t_max=t_half, output_grid=t_grid[: 11],
                           eigen_every=1)
    first = propagate(initial_state(basis), params, cfg1)
    cfg2 = EvolutionConfig(t_max=t_grid[-1] - t_half,
                           output_grid=t_grid[11:] - t_half, eigen_every=1)
    second = propagate(first.final_state, params, cfg2)
    chained = np.vstack([first.populations, second.populations])
    oneshot = quick_runs["krylov-exponential"].populations
    assert np.max(np.abs(chained - oneshot)) <= 1e-12


def test_store_states(quick_runs):
    params = ModelParams.matched_rates(n_tot=2, u=10.0)
    basis = enumerate_sector(5, 2)
    grid = np.linspace(0.0, 5.0, 6) / params.c_eff
    cfg = EvolutionConfig(t_max=grid[-1], output_grid=grid, store_states=True)
    ts = propagate(initial_state(basis), params, cfg)
    assert ts.states is not None and len(ts.states) == len(grid)
    assert all(isinstance(s, DensityMatrix) for s in ts.states)
    assert np.array_equal(ts.states[-1].matrix, ts.final_state.matrix)
    assert quick_runs["krylov-exponential"].states is None


def test_basis_mismatch_rejected():
    params = ModelParams.matched_rates(n_tot=2, u=10.0)
    rho = initial_state(enumerate_sector(5, 3))
    with pytest.raises(BasisMismatchError):
        propagate(rho, params, EvolutionConfig(t_max=1.0))


def test_invariant_violation_reports_time():
    # an absurdly tight trace tolerance turns normal roundoff into a failure
    params = ModelParams.matched_rates(n_tot=2, u=10.0)
    basis = enumerate_sector(5, 2)
    grid = np.linspace(0.0, 50.0, 11) / params.c_eff
    cfg = EvolutionConfig(t_max=grid[-1], output_grid=grid, trace_tol=1e-18)
    with pytest.raises(InvariantViolationError) as exc:
        propagate(initial_state(basis), params, cfg)
    assert exc.value.t_reached >= 0.0


# ---------------------------------------------------------------------------
# Dense Liouvillian cap
# ---------------------------------------------------------------------------

def test_dimension_cap():
    params = ModelParams.matched_rates(n_tot=4, u=10.0)  # dim 80 > 64
    with pytest.raises(DimensionCapError):
        dense_liouvillian(params)
    cfg = EvolutionConfig(t_max=1.0, backend="dense-exponential",
                          output_grid=np.array([1.0]))
    with pytest.raises(DimensionCapError):
        propagate(initial_state(enumerate_sector(5, 4)), params, cfg)


def test_dimension_cap_override():
    params = ModelParams.matched_rates(n_tot=2, u=10.0)  # dim 23
    with pytest.raises(DimensionCapError):
        dense_liouvillian(params, cap=16)
    liou = dense_liouvillian(params, cap=23)
    assert liou.shape == (23 * 23, 23 * 23)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_roundtrip(tmp_path, basis52):
    rho = random_density(basis52, seed=11)
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, rho, t=12.5)
    loaded, t = load_checkpoint(path)
    assert t == 12.5
    assert loaded.basis.n_sites == 5 and loaded.basis.n_tot == 2
    assert np.array_equal(loaded.matrix, rho.matrix)
    with open(path, "rb") as fh:
        assert fh.read(len(CHECKPOINT_MAGIC)) == b"KLSIM1\n"


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTAMAGIC" + b"\x00" * 64)
    with pytest.raises(ValueError, match="not a KLSIM1 checkpoint"):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path, basis52):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, random_density(basis52), t=1.0)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(path)


def test_checkpoint_header_mismatch(tmp_path, basis52):
    path = tmp_path / "state.ckpt"
    save_checkpoint(path, random_density(basis52), t=1.0)
    data = bytearray(path.read_bytes())
    # corrupt the dim field (third int64 after the magic)
    import struct

    off = len(CHECKPOINT_MAGIC) + 16
    data[off : off + 8] = struct.pack("<q", 99)
    path.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="dimension"):
        load_checkpoint(path)


# ---------------------------------------------------------------------------
# Grids and configuration validation
# ---------------------------------------------------------------------------

def test_log_time_grid():
    grid = log_time_grid(100.0, n=50, decades=4.0)
    assert len(grid) == 50
    assert grid[0] == 0.0
    assert grid[-1] == 100.0
    assert np.all(np.diff(grid) > 0)
    assert grid[1] == pytest.approx(100.0 * 1e-4, rel=1e-12)
    with pytest.raises(ValueError):
        log_time_grid(-1.0)
    with pytest.raises(ValueError):
        log_time_grid(1.0, n=1)


@pytest.mark.parametrize("kwargs", [
    {"t_max": 0.0},
    {"t_max": 1.0, "backend": "magic"},
    {"t_max": 1.0, "rel_tol": 0.0},
    {"t_max": 1.0, "krylov_dim": 1},
    {"t_max": 1.0, "eigen_every": 0},
    {"t_max": 1.0, "output_grid": np.array([0.0, 0.0, 1.0])},
    {"t_max": 1.0, "output_grid": np.array([0.0, 2.0])},
    {"t_max": 1.0, "output_grid": np.array([[0.0, 1.0]])},
])
def test_evolution_config_rejects(kwargs):
    with pytest.raises(ValueError):
        EvolutionConfig(**kwargs)


def test_default_grid_is_logarithmic():
    cfg = EvolutionConfig(t_max=10.0)
    assert np.array_equal(cfg.grid(), log_time_grid(10.0))


def test_initial_state_properties(basis52):
    rho = initial_state(basis52)
    assert rho.matrix[0, 0] == 1.0
    assert np.count_nonzero(rho.matrix) == 1
    assert rho.purity() == pytest.approx(1.0, abs=1e-15)
    rho.validate()


def test_density_matrix_validate(basis52):
    good = random_density(basis52)
    good.validate()
    bad_trace = DensityMatrix(basis52, good.matrix * 1.01)
    with pytest.raises(ValueError, match="trace"):
        bad_trace.validate()
    skewed = good.matrix.copy()
    skewed[0, 1] += 1e-3
    with pytest.raises(ValueError, match="hermiticity"):
        DensityMatrix(basis52, skewed).validate()
    neg = np.diag(np.linspace(-0.1, 0.2, basis52.dim)).astype(complex)
    neg /= np.trace(neg)
    with pytest.raises(ValueError, match="eigenvalue"):
        DensityMatrix(basis52, neg).validate()
