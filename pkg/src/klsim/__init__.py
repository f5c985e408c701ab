"""Dissipative transport of hard-core particles through a short chain.

A source reservoir feeds a 5-site chain of hard-core sites coupled by
coherent hopping and long-range Coulomb repulsion; a drain reservoir empties
it.  The reduced density matrix evolves under a Lindblad master equation
restricted to the conserved total-number sector, integrated by one of three
interchangeable backends (Krylov exponential, adaptive Runge-Kutta, dense
exponential).  The analysis layer extracts peak chain occupancy, level
crossings, plateau-lag increments, the saturation fit, and physical-unit
conversions; ``klsim.expcli`` exposes the experiment presets on the command
line.
"""

from .errors import (
    BasisMismatchError,
    ConfigError,
    DimensionCapError,
    FitRangeError,
    IntegrationError,
    InvalidModeError,
    InvariantViolationError,
    KlsimError,
    NoCrossingError,
    ObservableIntegrityError,
    StateNotInSectorError,
)
from .fockspace import SectorBasis, enumerate_sector, sector_dimension
from .operators import (
    ModelParams,
    build_hamiltonian,
    build_jump_drain,
    build_jump_source,
)
from .observables import ObservableVector, measure
from .evolution import (
    BACKENDS,
    DensityMatrix,
    EvolutionConfig,
    LindbladOperators,
    TimeSeries,
    build_lindblad_ops,
    dense_liouvillian,
    initial_state,
    lindblad_rhs,
    load_checkpoint,
    log_time_grid,
    propagate,
    save_checkpoint,
)
from .analysis import (
    FitResult,
    PhysicalParams,
    RunRecord,
    TunnelingRate,
    crossing_time,
    fit_saturation,
    lag_increments,
    max_occupancy,
    physical_time,
    rescale_time,
    tunneling_rate,
)
from .expcli import ExperimentConfig, run_preset, validate_config

__version__ = "0.1.0"

__all__ = [
    "BACKENDS",
    "BasisMismatchError",
    "ConfigError",
    "DensityMatrix",
    "DimensionCapError",
    "EvolutionConfig",
    "ExperimentConfig",
    "FitRangeError",
    "FitResult",
    "IntegrationError",
    "InvalidModeError",
    "InvariantViolationError",
    "KlsimError",
    "LindbladOperators",
    "ModelParams",
    "NoCrossingError",
    "ObservableIntegrityError",
    "ObservableVector",
    "PhysicalParams",
    "RunRecord",
    "SectorBasis",
    "StateNotInSectorError",
    "TimeSeries",
    "TunnelingRate",
    "build_hamiltonian",
    "build_jump_drain",
    "build_jump_source",
    "build_lindblad_ops",
    "crossing_time",
    "dense_liouvillian",
    "enumerate_sector",
    "fit_saturation",
    "initial_state",
    "lag_increments",
    "lindblad_rhs",
    "load_checkpoint",
    "log_time_grid",
    "max_occupancy",
    "measure",
    "physical_time",
    "propagate",
    "rescale_time",
    "run_preset",
    "save_checkpoint",
    "sector_dimension",
    "tunneling_rate",
    "validate_config",
    "__version__",
]
