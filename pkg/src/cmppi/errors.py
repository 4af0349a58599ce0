class ConfigurationError(ValueError):
    """Invalid problem setup: non-SPD covariance, bad config file, etc."""


class DataError(ValueError):
    """Numerical input that cannot be processed (NaN costs, empty batches)."""


class GenerationError(RuntimeError):
    """Procedural environment generation gave up."""
