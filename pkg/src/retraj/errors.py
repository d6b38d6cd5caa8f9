"""Exception types shared across the package."""


class RetrajError(Exception):
    """Base class for all package-specific errors."""


class InvalidPoseError(RetrajError):
    """Rotation is not orthonormal / det +1 within tolerance."""


class BehindCameraError(RetrajError):
    """Point has non-positive depth in the camera frame."""


class InvalidParamsError(RetrajError):
    """Scene or trajectory parameters violate their invariants."""


class CurationError(RetrajError):
    """A training triple or dataset cannot be built as requested."""


class ContainerError(RetrajError):
    """Container file is corrupt, truncated, or has the wrong version."""


class ConfigError(RetrajError):
    """A configuration value violates its invariants."""


class NumericError(RetrajError):
    """Non-finite values encountered where finite ones are required."""


class CheckpointError(RetrajError):
    """Checkpoint is incompatible with the requested configuration."""
