"""Exception types shared across the package."""


class ChromaflowError(Exception):
    """Base class for all package errors."""


class ShapeError(ChromaflowError, ValueError):
    pass


class AccumulationError(ChromaflowError, RuntimeError):
    """Raised when backward runs on a graph whose gradients were not reset."""


class FormatError(ChromaflowError, ValueError):
    """Malformed or truncated binary file."""


class DataError(ChromaflowError, ValueError):
    pass


class ConfigError(ChromaflowError, ValueError):
    pass


class IoError(ChromaflowError, OSError):
    pass
