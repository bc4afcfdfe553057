"""Exception hierarchy shared across the package.

Every failure mode that callers are expected to handle gets its own class so
that simulation and CLI layers can map them to termination flags and exit
codes without string matching.
"""


class SafecascadeError(Exception):
    """Base class for all package errors."""


class InfeasibleError(SafecascadeError):
    """No point satisfies the constraint system within tolerance."""


class MaxIterationsError(SafecascadeError):
    """Iteration budget exhausted before convergence."""


class RankDeficientError(SafecascadeError):
    """A matrix that must have full row rank does not."""


class ZeroGradientError(SafecascadeError):
    """Certificate gradient vanished where a nonzero gradient is assumed."""


class WitnessInfeasibleError(SafecascadeError):
    """Closed-form feasibility witness violated a constraint row.

    Signals that the certificate geometry is not disjoint or the decay rate
    does not satisfy the negative-side growth condition.
    """


class SelectionConditionError(SafecascadeError):
    """Pairwise offset condition for the Lipschitz selection failed."""

    def __init__(self, msg, pair=None):
        super().__init__(msg)
        self.pair = pair


class NotInFeasibleSetError(SafecascadeError):
    """Control input lies outside the constraint set it was audited against."""


class UnsupportedDimensionError(SafecascadeError):
    """Positive-basis construction only covers 2- and 3-dimensional inputs."""


class BadCountError(SafecascadeError):
    """Direction count is incompatible with the requested basis."""


class CoverageConditionError(SafecascadeError):
    """Basis coverage constant too small for the requested uncertainty level."""


class SelectionNotFeasibleError(SafecascadeError):
    """Anchor point handed to the reshaping step is not in the original set."""


class DegenerateGeometryError(SafecascadeError):
    """Obstacle geometry collapsed (zero-length segment, zero radius)."""


class AtCenterError(SafecascadeError):
    """Query point coincides with a disc center; no direction defined."""


class BadTransformError(SafecascadeError):
    """Barrier transform failed its monotonicity / convexity sampling audit."""


class NonFiniteStateError(SafecascadeError):
    """Integration produced NaN or infinite state."""


class ThrustSingularityError(SafecascadeError):
    """VTOL thrust magnitude fell below the feedback-linearization floor."""


class ConfigError(SafecascadeError):
    """Scenario configuration file failed to parse or validate."""
