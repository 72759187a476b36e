"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4.
"""


class HardReidError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(HardReidError):
    """Invalid configuration value or combination."""


class DataError(HardReidError):
    """Problem with input data (manifests, labels, images)."""


class ParseError(DataError):
    """Malformed input file; message carries the offending location."""


class ValidationError(DataError):
    """Structurally parseable input that violates an invariant."""


class ContractError(HardReidError):
    """Caller violated an API precondition (shape/argument mismatch)."""


class NumericError(HardReidError):
    """Non-finite value encountered during optimization."""
