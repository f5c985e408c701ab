"""Post-processing: time rescaling, occupancy extrema, plateau-lag fitting,
and physical-unit conversions.

Everything here is pure arithmetic over immutable run records; no I/O and no
integration.  The saturation fit is a damped Gauss-Newton (Levenberg-
Marquardt damping schedule) because the model is tiny (3 parameters, a
handful of points) and the basin around the documented initial guess is
well behaved.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import FitRangeError, NoCrossingError
from .observables import ObservableVector
from .operators import ModelParams

__all__ = [
    "RunRecord", "FitResult", "PhysicalParams", "TunnelingRate",
    "BOLTZMANN_CONSTANT", "PLANCK_CONSTANT", "POTASSIUM_MASS",
    "rescale_time", "max_occupancy", "crossing_time", "lag_increments",
    "fit_saturation", "physical_time", "tunneling_rate",
]

# CODATA 2018 exact values (SI)
BOLTZMANN_CONSTANT = 1.380649e-23       # J/K
PLANCK_CONSTANT = 6.62607015e-34        # J s
ATOMIC_MASS_UNIT = 1.66053906660e-27    # kg
POTASSIUM_MASS = 39.0983 * ATOMIC_MASS_UNIT  # kg

BODY_TEMPERATURE = 310.0  # K


@dataclass(frozen=True)
class RunRecord:
    """One simulated trajectory: model parameters plus tau-ordered samples."""

    params: ModelParams
    series: tuple

    def __post_init__(self):
        series = tuple(self.series)
        object.__setattr__(self, "series", series)
        if not series:
            raise ValueError("series must be nonempty")
        tau = np.array([s.tau for s in series])
        if np.any(np.diff(tau) <= 0):
            raise ValueError("tau must be strictly increasing")

    @classmethod
    def from_time_series(cls, ts) -> "RunRecord":
        return cls(params=ts.params, series=tuple(ts.observables))

    @property
    def tau(self) -> np.ndarray:
        return np.array([s.tau for s in self.series])

    @property
    def n_sf(self) -> np.ndarray:
        return np.array([s.n_sf for s in self.series])


def rescale_time(t, params: ModelParams):
    """tau = t * c_eff (= t/U in simulation units with hbar = c_hop = 1)."""
    return t * params.c_eff


def max_occupancy(run: RunRecord) -> float:
    """Peak n_SF, refined by a quadratic through the discrete argmax.

    The refinement only applies when the argmax is interior and the local
    curvature is negative; otherwise the sampled maximum is returned.
    """
    tau = run.tau
    n = run.n_sf
    i = int(np.argmax(n))
    if i == 0 or i == len(n) - 1:
        return float(n[i])
    x0, x1, x2 = tau[i - 1], tau[i], tau[i + 1]
    y0, y1, y2 = n[i - 1], n[i], n[i + 1]
    # Lagrange quadratic through the three bracketing samples
    denom = (x0 - x1) * (x0 - x2) * (x1 - x2)
    if denom == 0.0:
        return float(y1)
    aa = (x2 * (y1 - y0) + x1 * (y0 - y2) + x0 * (y2 - y1)) / denom
    bb = (x2 * x2 * (y0 - y1) + x1 * x1 * (y2 - y0) + x0 * x0 * (y1 - y2)) / denom
    if aa >= 0.0:  # not a local maximum at this resolution
        return float(y1)
    x_peak = -bb / (2.0 * aa)
    if not (x0 < x_peak < x2):
        return float(y1)
    cc = y1 - aa * x1 * x1 - bb * x1
    y_peak = aa * x_peak * x_peak + bb * x_peak + cc
    return float(max(y_peak, y1))


def crossing_time(run: RunRecord, level: float = 1.0) -> float:
    """tau of the LAST downward crossing of n_SF through ``level``.

    Located by linear interpolation between the bracketing samples.  The
    series must actually fall through the level somewhere after having been
    above it, else NoCrossingError.
    """
    tau = run.tau
    n = run.n_sf
    for i in range(len(n) - 2, -1, -1):
        if n[i] > level >= n[i + 1]:
            frac = (n[i] - level) / (n[i] - n[i + 1])
            return float(tau[i] + frac * (tau[i + 1] - tau[i]))
    raise NoCrossingError(
        f"n_SF never crosses {level:g} downward over tau in "
        f"[{tau[0]:g}, {tau[-1]:g}]"
    )


def lag_increments(tau_star: dict) -> dict:
    """Forward differences of tau* over consecutive N_tot values."""
    keys = sorted(tau_star)
    if len(keys) < 2:
        raise ValueError("need tau* at two or more consecutive N_tot values")
    for prev, cur in zip(keys, keys[1:]):
        if cur != prev + 1:
            raise ValueError(f"N_tot sequence has a gap between {prev} and {cur}")
    return {n: tau_star[n] - tau_star[n - 1] for n in keys[1:]}


@dataclass(frozen=True)
class FitResult:
    a: float
    b: float
    c_sat: float
    residual_norm: float
    converged: bool
    iterations: int

    @property
    def asymptote(self) -> float:
        return self.a + self.b

    def model(self, n_tot) -> np.ndarray:
        n_tot = np.asarray(n_tot, dtype=float)
        return self.a * (1.0 - np.exp(-n_tot / self.c_sat)) + self.b


def _saturation_residual(theta, n, y):
    a, b, c = theta
    e = np.exp(-n / c)
    r = a * (1.0 - e) + b - y
    jac = np.column_stack([1.0 - e, np.ones_like(n), -a * e * n / (c * c)])
    return r, jac


MAX_FIT_ITERATIONS = 500
FIT_STEP_TOL = 1e-10


def fit_saturation(data: dict, initial: tuple | None = None) -> FitResult:
    """Least squares for the saturation model dtau = a(1 - e^(-N/c_sat)) + b.

    Damped Gauss-Newton: the normal equations are regularized by
    lambda*diag(J^T J); lambda shrinks on accepted steps and grows on
    rejected ones.  Convergence is declared on relative step < 1e-10.
    Non-convergence returns best-so-far parameters with converged=False.
    """
    if len(data) < 4:
        raise FitRangeError(f"need at least 4 data points, got {len(data)}")
    keys = sorted(data)
    n = np.array(keys, dtype=float)
    y = np.array([data[k] for k in keys], dtype=float)

    if initial is None:
        a0 = float(y.max() - y.min())
        if a0 == 0.0:
            a0 = 1.0
        theta = np.array([a0, float(y.min()), float(np.median(n))])
    else:
        theta = np.array(initial, dtype=float)
    if theta[2] <= 0:
        raise FitRangeError("initial c_sat must be positive")

    r, jac = _saturation_residual(theta, n, y)
    cost = float(r @ r)
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, MAX_FIT_ITERATIONS + 1):
        jtj = jac.T @ jac
        jtr = jac.T @ r
        try:
            step = np.linalg.solve(jtj + lam * np.diag(np.diag(jtj)), -jtr)
        except np.linalg.LinAlgError:
            lam *= 10.0
            continue
        trial = theta + step
        if trial[2] <= 0:  # keep c_sat positive; treat as a rejected step
            lam *= 4.0
            continue
        r_t, jac_t = _saturation_residual(trial, n, y)
        cost_t = float(r_t @ r_t)
        if cost_t <= cost:
            rel = float(np.max(np.abs(step) / np.maximum(np.abs(trial), 1e-30)))
            theta, r, jac, cost = trial, r_t, jac_t, cost_t
            lam = max(lam / 3.0, 1e-14)
            if rel < FIT_STEP_TOL:
                converged = True
                break
        else:
            lam *= 4.0
            if lam > 1e14:
                break
    return FitResult(
        a=float(theta[0]), b=float(theta[1]), c_sat=float(theta[2]),
        residual_norm=float(np.sqrt(cost)), converged=converged, iterations=it,
    )


def physical_time(tau: float, u_dimensionless: float, c_phys: float) -> float:
    """Seconds corresponding to rescaled time tau: t_phys = U tau / c_phys."""
    if c_phys <= 0:
        raise ValueError("c_phys must be positive")
    return u_dimensionless * tau / c_phys


@dataclass(frozen=True)
class PhysicalParams:
    """Inputs of the tunneling-rate estimate (energies in units of k_B T)."""

    barrier_height: float = 1.7
    kinetic_energy: float = 1.7
    barrier_width_nm: float = 0.24
    mass_kg: float = POTASSIUM_MASS
    temperature: float = BODY_TEMPERATURE

    def __post_init__(self):
        if self.barrier_width_nm <= 0:
            raise ValueError("barrier_width_nm must be positive")
        if self.kinetic_energy <= 0:
            raise ValueError("kinetic_energy must be positive")
        if self.mass_kg <= 0 or self.temperature <= 0:
            raise ValueError("mass and temperature must be positive")


class TunnelingRate(NamedTuple):
    rate: float    # s^-1
    p_tun: float
    nu: float      # attempt (trapping) frequency, s^-1


def tunneling_rate(p: PhysicalParams, use_hbar: bool = False) -> TunnelingRate:
    """nu * p_tun with p_tun = exp(-Delta sqrt(2 m dE) / h).

    The exponent uses Planck's h by default; ``use_hbar`` switches the
    denominator to h/2pi for sensitivity exploration.  p_tun clamps to 1
    when the kinetic energy reaches the barrier top (dE <= 0).
    """
    kbt = BOLTZMANN_CONSTANT * p.temperature
    nu = p.kinetic_energy * kbt / PLANCK_CONSTANT
    delta_e = (p.barrier_height - p.kinetic_energy) * kbt
    if delta_e <= 0.0:
        p_tun = 1.0
    else:
        denom = PLANCK_CONSTANT / (2.0 * math.pi) if use_hbar else PLANCK_CONSTANT
        width_m = p.barrier_width_nm * 1e-9
        p_tun = math.exp(-width_m * math.sqrt(2.0 * p.mass_kg * delta_e) / denom)
    return TunnelingRate(rate=nu * p_tun, p_tun=p_tun, nu=nu)
