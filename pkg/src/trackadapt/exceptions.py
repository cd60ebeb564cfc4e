"""Exception types raised across the package."""


class TrackAdaptError(Exception):
    """Base class for all package errors."""


class ColmapFormatError(TrackAdaptError, ValueError):
    """Malformed, truncated or inconsistent COLMAP sparse model files."""


class InvalidModelError(TrackAdaptError, ValueError):
    """A SparseModel violates one of its invariants."""

    def __init__(self, violations):
        self.violations = list(violations)
        head = "; ".join(self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"invalid model: {head}{more}")


class BehindCameraError(TrackAdaptError, ValueError):
    pass


class CameraModelError(TrackAdaptError, ValueError):
    pass


class ConvergenceError(TrackAdaptError, RuntimeError):
    pass


class DegenerateConfigurationError(TrackAdaptError, ValueError):
    pass


class BatchSamplingError(TrackAdaptError, RuntimeError):
    pass


class LossInputError(TrackAdaptError, ValueError):
    pass


class TrainingDivergedError(TrackAdaptError, FloatingPointError):
    pass
