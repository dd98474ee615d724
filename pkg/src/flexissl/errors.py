"""Exception types shared across the package."""


class InvalidArgumentError(ValueError):
    pass


class NumericError(FloatingPointError):
    """A loss term or metric produced a non-finite value."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class SamplingError(RuntimeError):
    pass


class UndefinedMetricError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass
