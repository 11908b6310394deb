class WatermarkError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(WatermarkError, ValueError):
    pass


class InsufficientDataError(WatermarkError, ValueError):
    def __init__(self, message, survivors=None):
        super().__init__(message)
        self.survivors = survivors


class TrainingError(WatermarkError, RuntimeError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConfigurationError(WatermarkError, ValueError):
    pass


class UndefinedMetricError(WatermarkError, ValueError):
    pass


class BoundViolationError(WatermarkError, AssertionError):
    pass
