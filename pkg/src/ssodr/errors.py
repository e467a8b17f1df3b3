"""Exception hierarchy; each family maps to one CLI exit code."""


class SSODRError(Exception):
    exit_code = 5


class ConfigError(SSODRError):
    exit_code = 2


class DataError(SSODRError):
    exit_code = 3


class FormatError(DataError):
    pass


class ValidationError(DataError):
    pass


class InvalidInputError(DataError, ValueError):
    pass


class NumericalError(SSODRError):
    exit_code = 4


class StageError(SSODRError):
    exit_code = 5


class ScoringError(StageError):
    pass


class MiningError(StageError):
    pass


class SamplingError(StageError):
    pass


class RetrievalError(StageError):
    pass


class UndefinedAPError(StageError):
    pass
