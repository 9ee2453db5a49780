"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class GraftError(Exception):
    exit_code = 1


class UsageError(GraftError, ValueError):
    exit_code = 2


class ValidationError(UsageError):
    """Bad argument value (out-of-range label, rate >= 1, ...)."""


class ShapeError(UsageError):
    """Tensor extents disagree with what an operation needs."""


class FormatError(GraftError):
    """A file on disk is malformed. `field` names the offending part."""

    exit_code = 3

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class CorruptionError(FormatError):
    pass


class StalenessError(GraftError):
    """Cached features or a donor reference no longer match what reads them."""

    exit_code = 3


class InfeasibleError(GraftError):
    exit_code = 4


class DivergenceError(GraftError):
    exit_code = 5

    def __init__(self, message, epoch=None, batch=None, history=None):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.history = list(history or [])
