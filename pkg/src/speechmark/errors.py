"""Exception hierarchy shared across the package.

Each error class carries the process exit code the CLI maps it to:
2 for usage/config problems, 3 for data/format problems, 4 for numeric
failures.
"""


class SpeechmarkError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(SpeechmarkError):
    """Invalid configuration or command usage."""

    exit_code = 2


class DataError(SpeechmarkError):
    """Invalid data: bad dimensions, malformed files, inconsistent inputs."""

    exit_code = 3


class ContractError(DataError):
    """An operation was called with arguments violating its contract."""


class FormatError(DataError):
    """A file could not be parsed in its declared format."""


class UnsupportedFormatError(DataError):
    """A file parsed correctly but uses an unsupported encoding."""


class StaleKeysError(DataError):
    """Keys are bound to a different dataset than the one supplied."""


class ConflictError(DataError):
    """A write conflicts with existing state (duplicate id, stale version)."""


class DegenerateInputError(DataError):
    """Input is degenerate for the requested operation (e.g. silent audio)."""


class NumericError(SpeechmarkError):
    """A numeric computation produced non-finite values or diverged."""

    exit_code = 4
