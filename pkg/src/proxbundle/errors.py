"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration/usage/format problems are
exit 2, anything else that escapes is exit 1.
"""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class UsageError(ValueError):
    """An operation was called with arguments outside its contract."""


class ConfigError(ValueError):
    """A configuration document or model configuration is invalid."""


class FormatError(ValueError):
    """A binary input file is malformed; message names the byte offset."""
