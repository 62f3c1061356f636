"""
Error hierarchy for sphere-rkmk
Every failure the integrator or its operators can signal derives from SphereRKMKError
"""

from typing import Optional


class SphereRKMKError(Exception):
    """Base class for all library errors"""


class NonSkewInput(SphereRKMKError, ValueError):
    """vee() was handed a matrix that is not skew-symmetric"""


class OutOfInjectivityDomain(SphereRKMKError, ValueError):
    """Retraction inverse requested outside its injectivity domain (step size too large)"""


# Name used by the step-level API
RetractionDomainExceeded = OutOfInjectivityDomain


class UnsupportedStageCount(SphereRKMKError, ValueError):
    """Lobatto tableau requested for a stage count other than 2, 3 or 4"""


class NearSingularPotential(SphereRKMKError, ValueError):
    """Kepler trajectory reached the attractor or its antipode"""


class InconsistentInitialData(SphereRKMKError, ValueError):
    """Initial data violates the nonholonomic (or holonomic) constraint"""


class NewtonDivergence(SphereRKMKError, RuntimeError):
    """Stage equations did not converge below tolerance"""

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ToleranceNotReached(SphereRKMKError, RuntimeError):
    """Reference solution could not be verified by Richardson extrapolation"""

    def __init__(self, message: str, estimate: Optional[float] = None):
        if estimate is not None:
            message = f"{message} (estimate={estimate:.3e})"
        super().__init__(message)
        self.estimate = estimate
