"""Exception types shared across the package."""


class SpecretError(Exception):
    """Base class for all package errors."""


class DomainError(SpecretError, ValueError):
    """An argument lies outside the domain of the operation."""


class ShapeError(SpecretError, ValueError):
    """Array shapes or wavelength grids do not line up."""


class ConfigError(SpecretError, ValueError):
    """Invalid model, run or file configuration."""


class NumericError(SpecretError, ArithmeticError):
    """A numerical routine failed or produced non-finite values."""


class FormatError(SpecretError, ValueError):
    """A file on disk is malformed or carries an unsupported version."""
