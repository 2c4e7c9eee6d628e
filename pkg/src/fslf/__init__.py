"""Feature-sensitive atlas label fusion for volumetric segmentation."""
from .errors import ConfigError, DataError, DegenerateDataError, FslfError, NumericError, ShapeError
from .pipeline import FusionParams, iterate_segmentation, segment
from .volume import Volume, generate_phantom, read_svol, write_svol

__all__ = [
    "ConfigError", "DataError", "DegenerateDataError", "FslfError", "NumericError", "ShapeError",
    "FusionParams", "iterate_segmentation", "segment",
    "Volume", "generate_phantom", "read_svol", "write_svol",
]
