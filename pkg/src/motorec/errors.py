"""Exception hierarchy shared by every module; the CLI maps classes to exit codes."""


class MotorecError(Exception):
    exit_code = 1


class ConfigError(MotorecError, ValueError):
    exit_code = 2


class DataError(MotorecError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class AlignmentError(DataError):
    pass


class IntegrityError(DataError):
    pass


class IncompatibleVersionError(DataError):
    pass


class DimensionError(MotorecError, ValueError):
    pass


class ContractError(MotorecError, ValueError):
    pass


class SamplingError(MotorecError, RuntimeError):
    pass


class TrainingError(MotorecError, RuntimeError):
    exit_code = 4
