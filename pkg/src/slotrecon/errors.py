"""Exception hierarchy shared by the library and the command line."""


class SlotReconError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SlotReconError, ValueError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class FormatError(SlotReconError):
    """A file does not follow its declared binary or JSON layout."""

    exit_code = 3


class DataError(SlotReconError):
    """File content is well formed but the values are unusable."""

    exit_code = 3


class NumericalError(SlotReconError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    exit_code = 4
