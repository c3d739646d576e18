"""Exception hierarchy shared across the pipeline.

The CLI maps each category to a distinct exit code, so raise the most
specific class available.
"""


class SlotGCDError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SlotGCDError):
    """Invalid configuration value or inconsistent config combination."""


class DataError(SlotGCDError):
    """Malformed, missing, or degenerate input data."""


class NumericError(SlotGCDError):
    """Non-finite values or other numerical failures during computation."""
