class ShapeError(ValueError):
    """Tensor or layer-chain shapes do not agree."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class CacheError(RuntimeError):
    """A backward pass was given an activation cache it cannot use."""


class ConfigError(ValueError):
    """Invalid model, optimizer, or job configuration."""


class DataError(ValueError):
    """Malformed or inconsistent input data."""
