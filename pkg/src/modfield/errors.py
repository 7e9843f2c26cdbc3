"""Exception types shared across the package.

The CLI maps these onto its exit-code contract: FormatError/OSError -> 2,
ConfigError/DimensionError/DomainError -> 3, NumericalError -> 4.
"""


class ModfieldError(Exception):
    """Base class for all package errors."""


class DimensionError(ModfieldError):
    """Array shapes are incompatible; the message names both dimensions."""


class DomainError(ModfieldError):
    """A query point lies outside the signal domain or a tile footprint."""


class ConfigError(ModfieldError):
    """A configuration is internally inconsistent or out of range."""


class FormatError(ModfieldError):
    """A file does not conform to its documented binary/text format."""


class NumericalError(ModfieldError):
    """A non-finite value appeared where finiteness is required."""
