"""Exception types shared across the package."""


class AnyPrecError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AnyPrecError, ValueError):
    """Operand dimensions are inconsistent."""


class ParameterError(AnyPrecError, ValueError):
    """A scalar argument is outside its accepted range."""


class CodeRangeError(AnyPrecError, ValueError):
    """A quantization code does not fit the declared bit-width."""


class LayoutError(AnyPrecError, RuntimeError):
    """A bitplane tensor is in the wrong layout for the requested operation."""


class ApqFormatError(AnyPrecError, ValueError):
    """A .apq byte stream is malformed.

    ``offset`` is the byte position at which the problem was detected,
    when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
