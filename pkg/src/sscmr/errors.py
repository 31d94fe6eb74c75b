"""Exception hierarchy shared by every stage of the pipeline."""


class SscmrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SscmrError, ValueError):
    """Shapes, dimensions or settings are inconsistent."""


class ValidationError(SscmrError, ValueError):
    """Input data violates a documented invariant."""


class StateError(SscmrError, RuntimeError):
    """An object was used in the wrong lifecycle state."""


class NumericError(SscmrError, ArithmeticError):
    """A loss or parameter became non-finite or diverged."""


class LoadError(SscmrError, ValueError):
    """A file on disk does not conform to its format."""


class StageError(SscmrError, RuntimeError):
    """A pipeline stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
