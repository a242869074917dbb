"""Exception hierarchy shared by every stage of the toolkit."""


class DeepIDError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(DeepIDError, ValueError):
    """Tensor shapes or layer geometry are inconsistent."""


class GradientError(DeepIDError, ArithmeticError):
    """A function evaluated during differentiation returned a non-finite value."""


class DatasetError(DeepIDError, ValueError):
    """The dataset cannot support the requested sampling."""


class DivergenceError(DeepIDError, ArithmeticError):
    """Training produced a non-finite loss."""


class ModelInvalidError(DeepIDError, ValueError):
    """A fitted model violates its numerical invariants."""


class ProtocolError(DeepIDError, ValueError):
    """An evaluation protocol received inputs it cannot score."""


class FormatError(DeepIDError, ValueError):
    """A weight file is malformed.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigError(DeepIDError, ValueError):
    """The configuration file is malformed or names unknown keys."""


class StageError(DeepIDError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
