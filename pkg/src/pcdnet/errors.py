"""Exception types shared across the package."""


class PCDNetError(Exception):
    """Base class; the CLI maps subclasses to categorized messages."""

    category = "error"


class ShapeError(PCDNetError, ValueError):
    category = "dimension error"


class DomainError(PCDNetError, ValueError):
    category = "domain error"


class ConfigError(PCDNetError, ValueError):
    category = "configuration error"


class ContractError(PCDNetError, RuntimeError):
    category = "contract error"


class SerializationError(PCDNetError, ValueError):
    category = "serialization error"


class TrainingDiverged(PCDNetError, RuntimeError):
    category = "training diverged"
