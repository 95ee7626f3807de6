"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SparsetabError(Exception):
    exit_code = 1


class ConfigError(SparsetabError, ValueError):
    """Bad user input or configuration (exit 2)."""

    exit_code = 2


class DataError(SparsetabError):
    """Input data is malformed, missing, or stale (exit 3)."""

    exit_code = 3


class InvariantError(SparsetabError, AssertionError):
    """An internal invariant was violated (exit 4)."""

    exit_code = 4
