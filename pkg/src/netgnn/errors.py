"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so new exceptions should
subclass one of the three broad categories below.
"""


class NetgnnError(Exception):
    """Base class for all package errors."""


class ConfigError(NetgnnError):
    """Invalid configuration, flags, or constructor arguments."""


class DataError(NetgnnError):
    """Missing, malformed, or inconsistent input data."""


class NumericError(NetgnnError):
    """Non-finite values or other numeric failures."""


class DisconnectedError(ConfigError):
    """A graph operation required connectivity that does not hold."""


class CorruptCheckpointError(DataError):
    """Checkpoint file is truncated or fails its checksum."""


class CheckpointVersionError(DataError):
    """Checkpoint format version is not supported."""
