"""Exception types shared across the package."""


class FedRRError(Exception):
    """Base class for all package errors."""


class ConfigError(FedRRError, ValueError):
    """Invalid configuration, detected before any compute starts."""


class NumericalError(FedRRError, RuntimeError):
    """A computation produced unusable numbers (degenerate data, censoring, ...)."""


class CalibrationError(NumericalError):
    """The control-limit search could not produce a trustworthy answer."""
