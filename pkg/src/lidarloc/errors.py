"""Exception types raised across the package."""


class LidarLocError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LidarLocError, ValueError):
    """Input violates a documented precondition (shape, finiteness, range)."""


class DegenerateConfigurationError(LidarLocError):
    """Rigid alignment is rank deficient (collinear or coincident points)."""


class NoConsensusError(LidarLocError):
    """RANSAC found no hypothesis supported by enough inliers."""


class EmptyScanError(LidarLocError):
    """A simulated scan produced no returns."""


class TrainingDivergenceError(LidarLocError):
    """Loss or gradients became non-finite during training."""

    def __init__(self, message, batch_index=None, epoch=None):
        super().__init__(message)
        self.batch_index = batch_index
        self.epoch = epoch


class FileFormatError(LidarLocError, ValueError):
    """A data file is malformed (bad magic, version, truncation, values)."""


class EmptyReportError(LidarLocError):
    """Evaluation was requested on zero scans."""
