"""Exception types shared across the library."""


class DegmaError(Exception):
    """Base class for all library errors."""


class ExpressionError(DegmaError):
    """Malformed or unsupported closed-form expression."""


class StencilError(DegmaError):
    """Grid too small for the requested finite-difference stencil."""


class DegenerateMetricError(DegmaError):
    """Metric fails positivity (E, G, EG - F^2 or h must stay positive)."""


class NotAGeodesicError(DegmaError):
    """Base curve fails the geodesic-equation residual check."""


class DomainTooSmallError(DegmaError):
    """Geodesic flow or characteristic left the working domain."""


class TransversalityError(DegmaError):
    """Defining function not transversal to its zero set."""


class InfiniteOrderError(DegmaError):
    """No nonzero transverse derivative detected up to the configured order."""


class RegimeError(DegmaError):
    """Problem outside the implemented regime (n must be even and positive)."""


class InconsistentOrderError(DegmaError):
    """Declared vanishing order inconsistent with the data (factorization residual)."""


class ReductionBreakdownError(DegmaError):
    """1 + eps*Q too close to zero; reduction invalid (eps too large)."""


class FoldError(DegmaError):
    """Characteristic fan folded over (non-positive Jacobian)."""


class EpsilonTooLargeError(DegmaError):
    """Characteristics left the enlarged rectangle or certificate failed."""


class TransportInconsistencyError(DegmaError):
    """Mixed second-order coefficient did not vanish after a characteristic change."""


class InvalidCutoffError(DegmaError):
    """Cutoff kit failed its property audit."""


class CertificateFailureError(DegmaError):
    """Energy certificate invariant violated."""

    def __init__(self, message, node=None, margin=None):
        super().__init__(message)
        self.node = node
        self.margin = margin


class SolverFailureError(DegmaError):
    """Linear system singular or solver broke down."""


class ScaleError(DegmaError):
    """Invalid smoothing scale."""


class MollifierDefectError(DegmaError):
    """Measured smoothing exponent too far from its predicted value."""


class FactorDegeneracyError(DegmaError):
    """A positivity factor dropped below its floor during the iteration."""


class LedgerInconsistencyError(DegmaError):
    """Telescoping identity violated beyond tolerance (bookkeeping bug trap)."""


class ScheduleFailureError(DegmaError):
    """Iteration diverged; schedule or epsilon unsuitable."""


class GradientTooLargeError(DegmaError):
    """|grad z| reached 1; surface reconstruction invalid."""


class SignatureError(DegmaError):
    """Quadratic form lost positive-definiteness."""


class NotFlatEnoughError(DegmaError):
    """Connection-form holonomy too large to integrate flat coordinates."""


class IdentityViolationError(DegmaError):
    """Curvature identity mismatch beyond the consistency bound."""


class ConfigError(DegmaError):
    """Invalid or missing run configuration."""
