"""Image segmentation by level-set evolution on adapted anisotropic meshes."""

__version__ = "0.1.0"

from .chanvese import ModelParams, RegionConstants, delta_eps, heaviside_eps
from .fds import fds_run
from .fem import SolverParams, run_fem
from .mesh import TriMesh, uniform_initial_mesh
from .pipeline import (
    PipelineConfig,
    ama_represent,
    dice,
    extract_contour,
    initial_levelset,
    reconstruct,
    segment_multilevel,
    segment_one_level,
)
from .raster import PixelGrid, load_image, sample_bilinear, write_pgm

__all__ = [
    "ModelParams",
    "PipelineConfig",
    "PixelGrid",
    "RegionConstants",
    "SolverParams",
    "TriMesh",
    "ama_represent",
    "delta_eps",
    "dice",
    "extract_contour",
    "fds_run",
    "heaviside_eps",
    "initial_levelset",
    "load_image",
    "reconstruct",
    "run_fem",
    "sample_bilinear",
    "segment_multilevel",
    "segment_one_level",
    "uniform_initial_mesh",
    "write_pgm",
]
