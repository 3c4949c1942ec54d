"""Exception hierarchy.

Validation problems (bad config, bad masks, bad rules, bad labels) derive from
``ValidationError`` and map to CLI exit code 1; everything else that goes wrong
at run time maps to exit code 2.
"""


class StimTrainError(Exception):
    """Base class for all package errors."""


class ValidationError(StimTrainError, ValueError):
    """Input or configuration failed validation."""


class ConfigError(ValidationError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class MaskError(ValidationError):
    pass


class RuleError(ValidationError):
    pass


class InputError(ValidationError):
    pass


class ShapeError(ValidationError):
    pass


class LabelError(ValidationError):
    pass


class EnumerationError(ValidationError):
    pass


class FormatError(StimTrainError):
    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)


class StateError(StimTrainError, RuntimeError):
    pass


class DivergenceError(StimTrainError, RuntimeError):
    """Raised by the training step when the loss blows up.

    ``record`` carries the metrics of the offending step for post-mortem.
    """

    def __init__(self, message: str, record=None):
        self.record = record
        super().__init__(message)
