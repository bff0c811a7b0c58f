"""Exception hierarchy shared by all solver modules."""


class RiskDPError(Exception):
    """Base class for library errors."""

    exit_code = 3


class ConfigError(RiskDPError, ValueError):
    """Invalid configuration, problem file, or parameter set."""

    exit_code = 2


class DomainError(ConfigError):
    """A parameter lies outside the domain where the operation is defined."""


class InputError(ConfigError):
    """Non-finite or malformed numeric input."""


class NumericError(RiskDPError, ArithmeticError):
    """A solver produced non-finite values."""


class UnsupportedFamilyError(RiskDPError):
    """The risk family lacks a property the operation relies on."""


class DynamicsError(RiskDPError):
    """A transition function left its state box."""


class InstanceTooLargeError(RiskDPError):
    """Brute-force enumeration would exceed its configured cap."""
