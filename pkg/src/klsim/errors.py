"""Exception types shared across the package."""


class KlsimError(Exception):
    """Base class for all klsim errors."""


class StateNotInSectorError(KlsimError, KeyError):
    """Raised when an occupation state does not belong to the queried sector."""


class InvalidModeError(KlsimError, ValueError):
    """Raised for an unknown mode label (not 'source', 'drain', or a site index)."""


class BasisMismatchError(KlsimError, ValueError):
    """Raised when operators, states, or parameters refer to different sectors."""


class DimensionCapError(KlsimError, ValueError):
    """Raised when a dense superoperator is requested above the size cap."""


class IntegrationError(KlsimError, RuntimeError):
    """Propagation failure.  Carries the simulation time reached before failing."""

    def __init__(self, message, t_reached=None):
        super().__init__(message)
        self.t_reached = t_reached


class InvariantViolationError(IntegrationError):
    """A density-matrix invariant drifted beyond 10x its configured tolerance."""


class ObservableIntegrityError(KlsimError, ValueError):
    """An expectation value carried a non-negligible imaginary part."""


class NoCrossingError(KlsimError, ValueError):
    """The sampled occupancy never crosses the requested level downward."""


class FitRangeError(KlsimError, ValueError):
    """Saturation-fit input is malformed (too few points or gaps in N_tot)."""


class ConfigError(KlsimError, ValueError):
    """Experiment configuration is invalid.

    ``line`` and ``column`` locate the offending token when the error comes
    from parsing text; ``field`` names the offending key for range errors.
    """

    def __init__(self, message, *, line=None, column=None, field=None):
        super().__init__(message)
        self.line = line
        self.column = column
        self.field = field
