"""Exception types shared across the package."""


class PrcitubeError(Exception):
    """Base class for all library errors."""


class NonFiniteState(PrcitubeError):
    """Simulation produced a NaN/inf state component."""

    def __init__(self, time, state):
        self.time = time
        self.state = state
        super().__init__(f"non-finite state at t={time:.6g}")


class DegenerateConstraint(PrcitubeError):
    """Min-norm feedback constraint is violated but has a vanishing gradient,
    i.e. the geodesic tangent is uncontrollable at this state."""


class DimensionMismatch(PrcitubeError):
    """Input dimensions do not match a predictor's input spec."""


class NonFiniteLoss(PrcitubeError):
    """Training loss became NaN/inf; the offending batch is in the message."""


class InvalidAlpha(PrcitubeError):
    """Miscoverage level outside (0, 1)."""


class InsufficientCalibrationData(PrcitubeError):
    """Not enough calibration records to form both two-step splits."""


class InfeasibleMetric(PrcitubeError):
    """No rate in the requested range admits a feasible constant metric."""


class InfeasiblePlan(PrcitubeError):
    """Planner barrier could not be initialized (start inside an obstacle or
    an empty tightened box)."""


class SingularBlock(PrcitubeError):
    """Complementary metric block is singular; 2D projection undefined."""
