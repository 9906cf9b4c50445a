"""Exception hierarchy. Each family maps to one CLI exit code."""


class MHSTMError(Exception):
    exit_code = 1


class ConfigError(MHSTMError, ValueError):
    exit_code = 1


class DataError(MHSTMError, ValueError):
    exit_code = 2


class CorpusFormatError(DataError):
    pass


class EmptyCorpusError(DataError):
    pass


class InvariantError(MHSTMError, RuntimeError):
    """Raised when sampler bookkeeping is found inconsistent."""

    exit_code = 3
