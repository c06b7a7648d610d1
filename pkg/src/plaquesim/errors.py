"""Exception types shared across the simulator."""


class PlaquesimError(Exception):
    """Base class for all simulator errors."""


class DomainCollapse(PlaquesimError):
    """The bump height reached the channel half-height; the channel is pinched shut."""


class PinchWarning(UserWarning):
    """The bump height exceeds 95% of the channel half-height; results degrade."""


class SingularMatrix(PlaquesimError):
    """LU factorization hit a zero pivot (bad mesh or missing pressure constraint)."""


class DimensionMismatch(PlaquesimError):
    """Operands have incompatible shapes."""


class NonlinearDivergence(PlaquesimError):
    """Picard iteration failed to converge; the micro time step is too large."""

    def __init__(self, message, iterations=None, increment=None, step_index=None):
        super().__init__(message)
        self.iterations = iterations
        self.increment = increment
        self.step_index = step_index


class PeriodicityNotReached(PlaquesimError):
    """Cycle marching exhausted max_cycles before the period map became a fixed point."""

    def __init__(self, message, residual=None, cycles=None):
        super().__init__(message)
        self.residual = residual
        self.cycles = cycles


class ConnectivityMismatch(PlaquesimError):
    """Two meshes do not share triangle/edge connectivity."""


class NegativeConcentration(PlaquesimError):
    """The growth variable must stay nonnegative."""


class ConfigError(PlaquesimError):
    """Base class for configuration-file errors."""


class ParseError(ConfigError):
    def __init__(self, message, line=None):
        super().__init__(message)
        self.line = line


class UnknownKey(ConfigError):
    def __init__(self, name):
        super().__init__(f"unknown config key: {name!r}")
        self.name = name


class InvariantViolation(ConfigError):
    """A configuration value violates a positivity or divisibility invariant."""
