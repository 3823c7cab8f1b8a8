"""Exception types shared across the package."""


class VoxFCNError(Exception):
    """Base class for all package errors."""


class MalformedFileError(VoxFCNError, ValueError):
    """A binary input file does not follow its record layout."""


class ParseError(VoxFCNError, ValueError):
    """A text input (label, calibration, config, detections) could not be parsed."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)


class DimensionError(VoxFCNError, ValueError):
    """Tensor extents are incompatible with the requested operation."""


class ConfigurationError(VoxFCNError, ValueError):
    """A layer or run configuration is invalid."""


class DegenerateBoxError(VoxFCNError, ValueError):
    """Corner set collapses to a point; no box can be fitted."""


class CheckpointError(VoxFCNError, ValueError):
    """Checkpoint file is corrupt, truncated, or of an unknown version."""


class TrainingDivergedError(VoxFCNError, FloatingPointError):
    """Training produced a non-finite loss."""


class InfeasibleSceneError(VoxFCNError, RuntimeError):
    """Scene placement constraints could not be satisfied."""
