"""Exception hierarchy shared by every solver module."""


class RegimeALMError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(RegimeALMError):
    """Malformed problem data (shapes, symmetry, dimension ordering)."""


class AssumptionError(RegimeALMError):
    """Well-formed data that violates a standing model assumption."""


class RateError(RegimeALMError):
    """Generator matrix has a negative off-diagonal rate."""


class ConservationError(RegimeALMError):
    """Generator row does not sum to zero."""


class ProbabilityError(RegimeALMError):
    """Invalid probability vector."""


class BlowUpError(RegimeALMError):
    """Non-finite value encountered while integrating."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


class PositivityError(RegimeALMError):
    """Riccati solution fell to or below the positivity floor."""


class GainSingularityError(RegimeALMError):
    """R + P D'D is not positive definite or is too ill-conditioned."""


class ConvergenceError(RegimeALMError):
    """Fixed-point iteration exhausted its iteration budget."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


class ConfigurationError(RegimeALMError):
    """Inconsistent inputs, e.g. solutions on different grids."""


class FrontierDomainError(RegimeALMError):
    """P0*h20^2 + M1 outside (0, 1); the frontier is undefined."""


class InfeasibleError(RegimeALMError):
    """The expectation target cannot be reached by any portfolio."""


class EllipticityError(RegimeALMError):
    """sigma sigma' is singular where it must be inverted."""


class SimulationError(RegimeALMError):
    """Monte Carlo state became non-finite."""

    def __init__(self, message: str, path: int, t: float):
        super().__init__(message)
        self.path = path
        self.t = t
