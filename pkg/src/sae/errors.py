"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SAEError(Exception):
    exit_code = 3


class ConfigError(SAEError):
    """Invalid option or estimator/method combination."""

    exit_code = 1


class DataError(SAEError):
    """Malformed or inconsistent input data."""

    exit_code = 2


class CalibrationError(SAEError):
    exit_code = 3


class ConvergenceError(SAEError):
    exit_code = 3


class IdentificationError(SAEError):
    exit_code = 3


class SingularDesignError(SAEError):
    """Rank-deficient regression design."""

    exit_code = 3
