"""Exception types shared across the package."""


class EqtrackError(Exception):
    """Base class for all package-specific errors."""


class DegenerateSpectrum(EqtrackError):
    """Eigenvalue gap too small for a stable spectral chart."""


class ChartDomainExceeded(EqtrackError):
    """Point lies outside the injectivity domain of the spectral chart."""


class SingularDenominator(EqtrackError):
    """A scalar corrector denominator vanished."""


class SingularMatrix(EqtrackError):
    """A linear system in the corrector or response solve is singular."""


class NotConverged(EqtrackError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class CgStalled(EqtrackError):
    """Conjugate gradient failed to reduce the residual."""


class RestartRejected(EqtrackError):
    """Linear restart produced a certificate that fails its checks."""


class InsufficientData(EqtrackError):
    """Too few points for a statistical fit or test."""
