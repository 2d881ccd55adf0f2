class CCVQAError(Exception):
    """Base class for package errors."""


class ConfigError(CCVQAError, ValueError):
    """Invalid configuration or geometry."""


class ShapeError(CCVQAError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(CCVQAError, ValueError):
    """A documented precondition was violated."""


class IngestionError(CCVQAError, OSError):
    """A frame file or dataset record could not be read."""
