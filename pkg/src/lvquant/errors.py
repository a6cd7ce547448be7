"""Exception hierarchy shared by every lvquant module."""


class LVQuantError(Exception):
    """Base class for all library errors."""


class ShapeError(LVQuantError, ValueError):
    pass


class InvalidSpecError(LVQuantError, ValueError):
    """A layer specification that can never produce a valid output."""


class LabelError(LVQuantError, ValueError):
    pass


class ConfigError(LVQuantError, ValueError):
    pass


class CorruptedStateError(LVQuantError, RuntimeError):
    """Internal bookkeeping (caches, indices, optimizer keys) is inconsistent."""


class DegenerateBatchError(LVQuantError, ValueError):
    pass


class UndefinedCorrelationError(LVQuantError, ArithmeticError):
    """Pearson correlation requested for a series with zero variance."""


class FormatError(LVQuantError, ValueError):
    """Malformed LVQD/LVQC file. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
