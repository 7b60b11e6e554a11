"""Exception hierarchy shared by every module."""


class ChangeDiffError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ChangeDiffError, ValueError):
    pass


class PaletteMismatchError(ChangeDiffError, ValueError):
    pass


class PromptParseError(ChangeDiffError, ValueError):
    def __init__(self, message, span=None):
        super().__init__(message if span is None else f"{message} at {span!r}")
        self.span = span


class EmptyDistributionError(ChangeDiffError, ValueError):
    pass


class DegenerateDistributionError(ChangeDiffError, ValueError):
    pass


class EventInapplicableError(ChangeDiffError, ValueError):
    def __init__(self, mode, reason, step=None):
        where = f" (step {step})" if step is not None else ""
        super().__init__(f"event {mode!r} not applicable{where}: {reason}")
        self.mode = mode
        self.step = step


class ShapeError(ChangeDiffError, ValueError):
    pass


class ModeError(ChangeDiffError, RuntimeError):
    pass


class ContextOverflowError(ChangeDiffError, ValueError):
    pass


class RegistryError(ChangeDiffError, IndexError):
    pass


class AlignmentError(ChangeDiffError, ValueError):
    pass


class DataError(ChangeDiffError, ValueError):
    pass


class ManifestConflictError(ChangeDiffError, ValueError):
    pass


class UndefinedMetricError(ChangeDiffError, ValueError):
    pass
