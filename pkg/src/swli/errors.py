"""Exception hierarchy.

The CLI maps these onto exit codes: :class:`ConfigError` exits with 2, every
other :class:`SwliError` exits with 3.
"""


class SwliError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SwliError, ValueError):
    """An invalid configuration value. ``field`` names the offending key."""

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class ContractError(SwliError, ValueError):
    """A violated precondition: wrong shape, unknown attention site, missing entry."""


class NumericError(SwliError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class CapabilityError(SwliError):
    """The backend does not support the requested operation."""


class CacheFormatError(SwliError):
    """A cache file is truncated, corrupted or not a cache file at all."""


class StaleCacheError(SwliError):
    """A cache entry was produced under a different schedule or configuration."""
