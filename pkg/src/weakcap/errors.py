"""Exception types shared across the pipeline."""


class WeakcapError(Exception):
    """Base class for all package errors."""


class IngestError(WeakcapError):
    pass


class VocabError(WeakcapError):
    pass


class ShapeError(WeakcapError, ValueError):
    pass


class ArgumentError(WeakcapError, ValueError):
    pass


class TrainError(WeakcapError):
    pass


class DivergenceError(WeakcapError):
    """Raised when a loss becomes non-finite.

    ``where`` carries the step (or iteration/epoch) indices at which it happened.
    """

    def __init__(self, message, **where):
        super().__init__(message)
        self.where = where


class EvalError(WeakcapError):
    pass


class ConfigError(WeakcapError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
