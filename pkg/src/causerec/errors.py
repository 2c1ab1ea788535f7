"""Exception hierarchy. Each family carries the CLI exit code it maps to."""


class CauseError(Exception):
    exit_code = 1


class ConfigError(CauseError, ValueError):
    exit_code = 2


class DataError(CauseError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class ModelFormatError(DataError):
    pass


class DimensionError(CauseError, ValueError):
    exit_code = 3


class DomainError(CauseError, ValueError):
    exit_code = 3


class SingularityError(CauseError, ArithmeticError):
    exit_code = 3


class UndefinedMetricError(CauseError, ValueError):
    exit_code = 3


class DivergenceError(CauseError, ArithmeticError):
    exit_code = 4

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
