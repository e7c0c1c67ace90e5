"""capsense: boundary-integral capacity and shape-sensitivity toolkit."""

__version__ = "1.0.0"
