"""Exception types shared across the package."""


class MllcaError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(MllcaError):
    """Invalid configuration or incompatible options."""


class DataError(MllcaError):
    """Input data violates the package's data contracts."""


class EstimationError(MllcaError):
    """An estimation routine could not produce a usable result."""
