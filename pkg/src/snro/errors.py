"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid parameters or configuration values."""


class DatasetError(ValueError):
    """Malformed or unreadable input data."""


class ProtocolError(RuntimeError):
    """An incremental-training stage was invoked out of order."""
