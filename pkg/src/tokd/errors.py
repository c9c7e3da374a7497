"""Exception types shared across the package."""


class TokdError(Exception):
    pass


class DimensionError(TokdError, ValueError):
    pass


class ConfigError(TokdError, ValueError):
    pass


class NumericError(TokdError, ArithmeticError):
    pass


class GeometryError(TokdError, ValueError):
    pass


class ArgumentError(TokdError, ValueError):
    pass


class DataError(TokdError, ValueError):
    pass


class FormatError(DataError):
    pass


class ValidationError(DataError):
    pass


class DatasetIOError(TokdError, OSError):
    pass
