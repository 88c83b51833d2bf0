"""Exception types shared across the package."""


class TmdWignerError(Exception):
    """Base class; ``exit_code`` is what the CLI returns for it."""

    exit_code = 1


class ConfigError(TmdWignerError, ValueError):
    exit_code = 2

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:{line}: " if line is not None else f"{path}: "
        super().__init__(where + message)


class DataError(TmdWignerError):
    exit_code = 3


class NumericalError(TmdWignerError):
    exit_code = 4


class TruncationError(NumericalError):
    def __init__(self, message, leakage=None):
        self.leakage = leakage
        super().__init__(message)


class RankDeficientError(NumericalError):
    def __init__(self, message, max_n_max=None):
        self.max_n_max = max_n_max
        super().__init__(message)


class MonteCarloRejectionError(NumericalError):
    def __init__(self, message, kept=0, total=0):
        self.kept = kept
        self.total = total
        super().__init__(message)
