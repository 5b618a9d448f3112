"""Exception types raised across the package."""


class PoseError(Exception):
    """Base class for all package errors."""


class InvalidQuaternion(PoseError, ValueError):
    pass


class DegenerateWarp(PoseError):
    pass


class ImageTooSmall(PoseError, ValueError):
    pass


class FormatError(PoseError, ValueError):
    pass


class DimensionError(PoseError, ValueError):
    pass


class NoTemplate(PoseError):
    pass


class InvalidCount(PoseError, ValueError):
    pass


class EmptyVolume(PoseError):
    pass


class OutOfView(PoseError):
    pass


class InvalidBins(PoseError, ValueError):
    pass


class NoValidPose(PoseError):
    pass


class RefinementFailed(PoseError):
    pass


class EmptyModel(PoseError, ValueError):
    pass


class InvalidGT(PoseError, ValueError):
    pass


class EmptyRender(PoseError):
    pass


class ReportError(PoseError):
    pass


class DatasetError(PoseError):
    """Missing or malformed dataset / configuration (CLI exit code 2)."""
