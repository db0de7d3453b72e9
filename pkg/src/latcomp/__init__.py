"""Learned latent compression and downscaling of gridded weather fields."""
from .errors import (ConfigError, DataError, FingerprintError, LatcompError, MissingVariableError,
                     ShapeError, StructuralError, TrainingAborted)
from .grid import GridField, NormStats, patchify, unpatchify, zscore_apply, zscore_fit, zscore_invert

__version__ = "0.1.0"
