"""Exception types. The CLI maps these onto process exit codes."""


class SSEDSError(Exception):
    exit_code = 1


class ConfigError(SSEDSError, ValueError):
    exit_code = 2


class DataError(SSEDSError, ValueError):
    exit_code = 3


class NumericalError(SSEDSError, ArithmeticError):
    exit_code = 4
