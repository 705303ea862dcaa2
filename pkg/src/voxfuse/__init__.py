"""Sparse-voxel fusion of multi-view 2D feature maps with open-vocabulary
3D querying: TSDF-built voxel grids, alpha-composited rendering,
confidence-weighted feature fusion, and retrieval utilities."""

from .camera import Camera
from .errors import DataError, DomainError, UsageError, VoxfuseError
from .feat2d import AttentionConfig, CropFeature
from .fuse3d import FusionConfig, ViewBundle
from .geomreg import PatchSpec
from .grid import SparseVoxelGrid, Voxel, VoxelKey, morton_decode, morton_encode
from .image import ImagePlane
from .query import QueryEmbedding, QueryResult
from .tsdf import TriangleMesh, TsdfField

__all__ = [
    "AttentionConfig", "Camera", "CropFeature", "DataError", "DomainError",
    "FusionConfig", "ImagePlane", "PatchSpec", "QueryEmbedding", "QueryResult",
    "SparseVoxelGrid", "TriangleMesh", "TsdfField", "UsageError", "ViewBundle",
    "Voxel", "VoxelKey", "VoxfuseError", "morton_decode", "morton_encode",
]
