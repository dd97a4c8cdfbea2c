"""Differentiable 3D Gaussian splatting."""
from .gaussians import SOURCE_PIXEL, SOURCE_VOLUME, GaussianSet, covariance_3d, merge_gaussians, quat_to_rotmat
from .io import export_ply, import_ply, read_pfm, read_ppm, write_pfm, write_ppm
from .render import (Projected, RenderOutput, RenderSettings, SortOrderTape, brute_force_render, project_splat,
                     project_splats, render)

__all__ = [
    "SOURCE_PIXEL", "SOURCE_VOLUME", "GaussianSet", "covariance_3d", "merge_gaussians", "quat_to_rotmat",
    "export_ply", "import_ply", "read_pfm", "read_ppm", "write_pfm", "write_ppm",
    "Projected", "RenderOutput", "RenderSettings", "SortOrderTape", "brute_force_render", "project_splat",
    "project_splats", "render",
]
