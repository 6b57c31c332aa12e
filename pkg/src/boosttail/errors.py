"""Exception hierarchy shared by the library and the CLI.

The CLI maps these onto exit codes: ``ConfigError`` -> 2,
``NumericalError`` -> 3, ``VerificationError`` -> 4.
"""


class BoostTailError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(BoostTailError, ValueError):
    """Invalid user configuration or parameters outside a function's domain."""


class DomainError(ConfigError):
    """A function was evaluated outside its domain (e.g. MGF past its singularity)."""


class UnknownLabelError(BoostTailError, KeyError):
    pass


class NumericalError(BoostTailError, ArithmeticError):
    """A numerical procedure could not produce a trustworthy value."""


class InstabilityError(NumericalError):
    """Load rho >= 1: the queue has no stationary regime."""


class NoRootError(NumericalError):
    pass


class DegeneracyError(NumericalError):
    pass


class InfiniteBoostError(NumericalError):
    """A label would receive an infinite boost at the requested theta."""


class InadmissibleBoostError(NumericalError):
    """E[b(L)(exp(gamma S) - 1)] is infinite, so the tail constant formula does not apply."""


class InconsistentParametersError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    pass


class IntegrationError(NumericalError):
    pass


class InsufficientDataError(NumericalError):
    pass


class PairingError(BoostTailError, ValueError):
    """Two samples compared pairwise were not generated from the same trace."""


class SizeGuardError(ConfigError):
    pass


class VerificationError(BoostTailError):
    pass
