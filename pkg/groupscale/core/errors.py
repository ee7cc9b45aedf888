"""Error hierarchy shared by every groupscale module.

The CLI maps these onto stable exit codes:

    ConfigError, ShapeMismatchError        -> 1
    NumericError (and subclasses)          -> 2
    TensorFormatError, ManifestError, I/O  -> 3
"""

from typing import Optional


class GroupScaleError(Exception):
    """Base class for all groupscale failures."""


class ConfigError(GroupScaleError):
    """Invalid configuration or command-line arguments."""


class ShapeMismatchError(GroupScaleError, ValueError):
    """Two arrays that must agree in shape do not."""


class NumericError(GroupScaleError):
    """A numerical step failed. Carries the layer index when known."""

    def __init__(self, message: str, layer_index: Optional[int] = None):
        self.layer_index = layer_index
        if layer_index is not None:
            message = f"layer {layer_index}: {message}"
        super().__init__(message)

    def at_layer(self, layer_index: int) -> "NumericError":
        """Return a copy of this error tagged with a layer index."""
        if self.layer_index is not None:
            return self
        err = type(self).__new__(type(self))
        NumericError.__init__(err, str(self), layer_index)
        return err


class EmptyCalibrationError(NumericError):
    """Statistics were requested from zero calibration samples."""


class DegenerateStatsError(NumericError):
    """Statistics carry no signal (e.g. all-zero calibration inputs)."""


class FactorizationError(NumericError):
    """Cholesky factorization failed; the Hessian needs more damping."""


class InstanceTooLargeError(GroupScaleError, ValueError):
    """Exhaustive enumeration was asked to visit too many states."""


class TensorFormatError(GroupScaleError):
    """A tensor file is malformed. `field` names the offending part."""

    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


class ManifestError(GroupScaleError):
    """A model manifest is inconsistent with itself or its weight files."""
