"""Semantic RGB-D reconstruction.

Consistent 2D instance masks from a sparse semantic object map, TSDF fusion
with marching-cubes meshing, and multi-view voxel label fusion.
"""
__version__ = "0.1.0"

from .core import Intrinsics, Pose, compose, inverse, project, unproject  # noqa: E402
from .fusion import Mesh, TsdfVolume, extract_mesh  # noqa: E402
from .kernels import BACKEND  # noqa: E402

__all__ = ["Intrinsics", "Pose", "compose", "inverse", "project", "unproject",
           "Mesh", "TsdfVolume", "extract_mesh", "BACKEND", "__version__"]
