"""Shared exception types."""


class StaeckelTorusError(Exception):
    """Base class for all package-specific failures."""


class AxisError(StaeckelTorusError, ValueError):
    """Point lies on the symmetry axis R=0 where the prolate chart is singular."""


class SingularMetricError(StaeckelTorusError, ValueError):
    """Scale factors requested on a degenerate coordinate surface."""


class BracketError(StaeckelTorusError, ValueError):
    """Root bracket does not enclose a sign change."""


class SingularJacobianError(StaeckelTorusError, RuntimeError):
    """Jacobian numerically singular during a Newton solve."""


class ConvergenceError(StaeckelTorusError, RuntimeError):
    """Iterative solver exhausted its iteration budget."""


class NoBoundOrbitError(StaeckelTorusError, ValueError):
    """Integrals of motion do not correspond to a bound toy orbit."""


class UnmappableTorusError(StaeckelTorusError, ValueError):
    """Fourier transform produced a negative oscillatory action somewhere on the grid."""

    def __init__(self, msg, theta=None, J_toy=None):
        super().__init__(msg)
        self.theta = theta
        self.J_toy = J_toy


class DegenerateIntervalError(StaeckelTorusError, ValueError):
    """Quadrature interval has zero or negative length."""


class ConfigError(StaeckelTorusError, ValueError):
    """Invalid or incomplete run configuration."""
