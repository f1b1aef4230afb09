"""Exception hierarchy shared by all passt modules."""


class PasstError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PasstError, ValueError):
    pass


class ShapeError(PasstError, ValueError):
    pass


class OutOfBounds(PasstError, ValueError):
    pass


class FormatError(PasstError):
    """Malformed on-disk data. ``offset`` is the byte offset of the problem, if known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionError(FormatError):
    pass


class SchemaError(FormatError):
    pass


class GapError(PasstError):
    pass


class DivergedError(PasstError, ArithmeticError):
    """Numerical blow-up. ``step`` is the index of the failing step, if known."""

    def __init__(self, message, step=None, history=None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step
        self.history = history if history is not None else []


class DeadEnd(PasstError):
    pass


class SingularKernel(PasstError, ArithmeticError):
    pass


class DegenerateData(PasstError, ValueError):
    pass
