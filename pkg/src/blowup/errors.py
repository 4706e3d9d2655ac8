"""Exception types shared across the package."""


class BlowupError(Exception):
    """Base class for all errors raised by :mod:`blowup`."""


class ImplicitNoRoot(BlowupError):
    """The implicit Euler equation has no real root for the given step."""


class NoDelta(BlowupError):
    """The delta equation has no root in (1, inf); the step is too large."""


class NumericalOverflow(BlowupError, ArithmeticError):
    """A computed quantity is not finite."""


class DegenerateFit(BlowupError, ValueError):
    """A rate or extrapolation fit is ill-posed for the supplied data."""


class SolverFailure(BlowupError):
    """The linear solve did not reach the requested residual."""


class AssemblyDegenerate(BlowupError):
    """A mesh entity with zero measure was met during assembly."""


class ConfigError(BlowupError, ValueError):
    """Invalid run configuration."""
