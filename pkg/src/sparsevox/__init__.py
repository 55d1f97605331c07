"""Lossless point cloud geometry coding with a masked sparse-convolution context model."""

from .errors import (
    CorruptBitstreamError,
    ModelError,
    ModelMismatchError,
    PlyError,
    SparseVoxError,
    TrainingDiverged,
    WeightFileError,
)
from .pc_io import PointCloud, VoxelBlock, parse_ply, raster_coord, raster_index, write_ply

__version__ = "0.1.0"

__all__ = [
    "CorruptBitstreamError",
    "ModelError",
    "ModelMismatchError",
    "PlyError",
    "PointCloud",
    "SparseVoxError",
    "TrainingDiverged",
    "VoxelBlock",
    "WeightFileError",
    "parse_ply",
    "raster_coord",
    "raster_index",
    "write_ply",
]
