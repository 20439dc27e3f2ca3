"""Class-incremental video classification with sparse exemplar memory and Early Break."""

from snro.errors import ConfigurationError, DatasetError, ProtocolError

__version__ = "0.1.0"

__all__ = ["ConfigurationError", "DatasetError", "ProtocolError", "__version__"]
