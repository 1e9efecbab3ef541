"""Exception hierarchy shared by all modules."""


class RhoDichError(Exception):
    """Base class for every error raised by the package."""


class RateError(RhoDichError):
    """Invalid rate function specification (e.g. non-positive mu sample)."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class RateDivergenceError(RateError):
    """Numeric inversion of a rate could not bracket the requested value."""


class StiffnessError(RhoDichError):
    """The adaptive integrator underflowed its step size."""

    def __init__(self, message, interval=None):
        super().__init__(message)
        self.interval = interval


class ContinuityError(RhoDichError):
    """A propagator jumps on a family that is not flagged discontinuous."""


class NormInadmissibleError(RhoDichError):
    """A norm family violates the lower bound ||x|| <= ||x||_t."""

    def __init__(self, message, t=None, x=None):
        super().__init__(message)
        self.t = t
        self.x = x


class NoDichotomyError(RhoDichError):
    """No exponential splitting was detected (spectral gap or fit failure)."""

    def __init__(self, message, exponent=None):
        super().__init__(message)
        self.exponent = exponent


class InvertibilityError(RhoDichError):
    """A restriction to the unstable bundle is singular or ill-conditioned."""

    def __init__(self, message, condition=None):
        super().__init__(message)
        self.condition = condition


class DegenerateSplittingError(RhoDichError):
    """Stable and unstable subspaces are (numerically) not complementary."""

    def __init__(self, message, angle=None):
        super().__init__(message)
        self.angle = angle


class CommutationError(RhoDichError):
    """Projections do not commute with the dynamics within tolerance."""


class HorizonTooShortError(RhoDichError):
    """A truncated supremum is still increasing at its truncation edge."""


class ConvergenceError(RhoDichError):
    """Picard iteration did not reach the requested tolerance."""

    def __init__(self, message, ratio=None):
        super().__init__(message)
        self.ratio = ratio


class ConfigError(RhoDichError):
    """Scenario configuration rejected during pre-flight checks."""
