class ConfigError(ValueError):
    """Raised when a configuration is invalid before any work starts."""


class ShapeError(ValueError):
    """Raised when a tensor does not have the shape a network expects."""


class ValidationError(ValueError):
    """Raised when input values violate a documented precondition."""


class UndefinedMetricError(ValueError):
    """Raised when a metric is mathematically undefined for its inputs."""


class IngestionError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass
