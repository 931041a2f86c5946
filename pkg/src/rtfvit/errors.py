"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes, axes or ranges that do not fit an operation."""


class ValidationError(ValueError):
    """Input values outside an operation's domain (e.g. labels not in {0, 1})."""


class ContractError(RuntimeError):
    """An API precondition was violated by the caller."""


class StateError(RuntimeError):
    """An object was queried before it held the requested state."""


class ConfigError(ValueError):
    """Invalid model, training or experiment configuration."""


class NumericalError(FloatingPointError):
    """A computation produced NaN or Inf."""


class DivergenceError(RuntimeError):
    """Training loss became non-finite."""


class MetricError(ValueError):
    """A metric is undefined for the given inputs."""


class GenerationError(ValueError):
    """A synthetic dataset specification cannot be satisfied."""
