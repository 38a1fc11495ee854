"""Error categories; the CLI maps each to an exit code."""


class ConfigError(ValueError):
    """Inconsistent or unknown configuration (exit 2)."""


class DataIOError(OSError):
    """Unreadable or malformed input file (exit 3)."""


class NumericAbort(RuntimeError):
    """Non-finite loss or activations during training (exit 4)."""
