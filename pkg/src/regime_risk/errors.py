"""Exception hierarchy shared by the library and the CLI."""


class RegimeRiskError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(RegimeRiskError, ValueError):
    exit_code = 2


class DataError(RegimeRiskError, ValueError):
    exit_code = 3


class NumericalError(RegimeRiskError, ArithmeticError):
    exit_code = 4
