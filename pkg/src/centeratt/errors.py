"""Exception hierarchy shared by every module of the package."""


class CenterAttError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(CenterAttError, ValueError):
    """Tensor shapes do not line up; ``dim`` names the offending dimension."""

    exit_code = 3

    def __init__(self, message, dim=None):
        super().__init__(message)
        self.dim = dim


class ConfigError(CenterAttError, ValueError):
    exit_code = 2


class WeightFileError(CenterAttError):
    exit_code = 4


class MissingWeightsError(CenterAttError, KeyError):
    exit_code = 4

    def __str__(self):
        return Exception.__str__(self)


class PrecisionOverflowError(CenterAttError, OverflowError):
    """Raised when half-precision conversion would turn weights into infinities."""

    exit_code = 5

    def __init__(self, names):
        self.names = list(names)
        super().__init__("fp16 overflow in tensor(s): " + ", ".join(self.names))


class PlacementError(CenterAttError):
    """Scene generation could not place all requested boxes."""

    exit_code = 6

    def __init__(self, achieved, requested):
        self.achieved = achieved
        self.requested = requested
        super().__init__(
            f"placed only {achieved} of {requested} boxes without overlap")


class SceneFormatError(CenterAttError):
    exit_code = 7


class MissingInputError(CenterAttError):
    """Inputs a command needs (scenes, detection files) are absent."""

    exit_code = 8
