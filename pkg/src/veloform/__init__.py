"""Velocity-coupled implicit fields for 4D shape interpolation."""

__version__ = "0.1.0"

from .errors import ConfigError, EmptyLevelSetError, GeometryError, NumericalError, VeloformError
from .geometry import AxisAlignedDomain, CorrespondencePair, PointCloud, TriMesh
from .losses import LossWeights
from .training import PairDataset, TrainConfig, load_state, save_state, train

__all__ = [
    "__version__",
    "AxisAlignedDomain",
    "ConfigError",
    "CorrespondencePair",
    "EmptyLevelSetError",
    "GeometryError",
    "LossWeights",
    "NumericalError",
    "PairDataset",
    "PointCloud",
    "TrainConfig",
    "TriMesh",
    "VeloformError",
    "load_state",
    "save_state",
    "train",
]
