class PhenoCDError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ConfigError(PhenoCDError, ValueError):
    exit_code = 1


class ValidationError(PhenoCDError, ValueError):
    exit_code = 1


class IngestionError(PhenoCDError):
    exit_code = 1


class ShapeError(PhenoCDError, ValueError):
    exit_code = 2


class NumericError(PhenoCDError, ArithmeticError):
    exit_code = 2
