"""Exception types shared across the package."""


class UlcersegError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgumentError(UlcersegError, ValueError):
    """An argument violates a documented precondition."""


class NotFoundError(UlcersegError, KeyError):
    """A requested id (superpixel, image, ...) does not exist."""


class ConfigurationError(UlcersegError):
    """Incompatible components were wired together (e.g. dimension mismatch)."""


class DataError(UlcersegError):
    """Input data (files, datasets, CSVs) is missing or malformed."""


class TrainingError(UlcersegError):
    """Training failed (divergence, non-finite loss).  Carries the epoch index."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class MaeUndefinedError(UlcersegError):
    """MAE ratio is undefined because the reference mask has no wounded pixels.

    The pixel accuracy is still well defined and is attached to the exception.
    """

    def __init__(self, message, pixel_accuracy):
        super().__init__(message)
        self.pixel_accuracy = pixel_accuracy
