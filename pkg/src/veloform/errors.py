"""Exception types shared across the package."""


class VeloformError(Exception):
    """Base class for all package errors."""


class GeometryError(VeloformError, ValueError):
    """Invalid point cloud, mesh, correspondence or domain."""


class ConfigError(VeloformError, ValueError):
    """Unknown or invalid configuration key/value."""


class NumericalError(VeloformError, RuntimeError):
    """Non-finite values or an ill-posed numerical state."""


class EmptyLevelSetError(NumericalError):
    """The sampled scalar field has no sign change."""
