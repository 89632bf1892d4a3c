"""Exception types shared across the package."""


class NumericOverflowError(RuntimeError):
    """A simulated state or score term became non-finite.

    Policy: abort the computation and report, never clamp. Clamping would
    silently bias downstream averages.
    """

    def __init__(self, message, theta=None, state=None):
        super().__init__(message)
        self.theta = theta
        self.state = state


class DegenerateWeightsError(RuntimeError):
    """Every particle weight at a resampling epoch was zero."""


class ObservationAlignmentError(ValueError):
    """Two observation times rounded onto the same lattice point."""
