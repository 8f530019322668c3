"""Exception hierarchy shared by every module."""


class FangError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FangError, ValueError):
    pass


class InputError(FangError, ValueError):
    pass


class DimensionError(FangError, ValueError):
    pass


class ParameterError(FangError, ValueError):
    pass


class FormatError(FangError, ValueError):
    """Malformed tensor archive or report file."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericalError(FangError, ArithmeticError):
    pass


class SingularityError(NumericalError):
    pass


class StageError(FangError):
    """Wraps an error raised inside a pipeline stage with its location."""

    def __init__(self, stage, layer, cause):
        where = stage if layer is None else f"{stage} (layer {layer})"
        super().__init__(f"{where}: {cause}")
        self.stage = stage
        self.layer = layer
        self.cause = cause
