"""Exception hierarchy. Each class maps onto a CLI exit code."""


class HflowError(Exception):
    exit_code = 1


class ConfigError(HflowError, ValueError):
    exit_code = 2


class DataError(HflowError, ValueError):
    exit_code = 3


class NumericError(HflowError, ArithmeticError):
    exit_code = 4
