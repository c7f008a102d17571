"""Exception hierarchy shared by all edje modules.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4, anything else -> 1.
"""


class EdjeError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(EdjeError):
    """Invalid configuration: bad dimensions, unknown keys, bad toggles."""


class ShapeError(ConfigError):
    """Tensor shape mismatch; message names the offending shapes."""


class DataError(EdjeError):
    """Problem with input data: manifests, ids, stores, dumps."""


class NotFoundError(DataError):
    """A requested record or id does not exist."""


class ConflictError(DataError):
    """A write collides with an existing record id."""


class FormatError(DataError):
    """A file does not follow its documented binary or text format."""


class CorruptionError(DataError):
    """Stored bytes fail checksum verification."""


class NumericError(EdjeError):
    """Non-finite values where finite ones are required."""
