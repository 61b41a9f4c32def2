"""Exception hierarchy. Each family carries the CLI exit code it maps to."""

from __future__ import annotations


class TrapforgeError(Exception):
    exit_code = 3


class ConfigError(TrapforgeError):
    """Bad flags, bad config file, bad argument values."""

    exit_code = 2


class DataError(TrapforgeError):
    """Input data that cannot be processed as requested."""

    exit_code = 3


class SchemaError(TrapforgeError):
    exit_code = 4


class IoFailure(TrapforgeError):
    exit_code = 5
