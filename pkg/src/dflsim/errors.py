"""Shared exception types."""


class ConfigError(ValueError):
    """Raised when a configuration value is unknown, malformed, or infeasible."""
