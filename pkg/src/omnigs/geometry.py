"""Pinhole camera math and volume/plane coordinate mappings.

Conventions used throughout the package:

* camera frame is x right, y down, z forward;
* continuous pixel coordinates put the center of pixel (row i, col j) at
  ``(u, v) = (j + 0.5, i + 0.5)``;
* ``d`` in ``unproject_pixel`` is distance along the unit ray, not camera z;
* voxel ``(h, w, z)`` lives at its cell center, and the volume axes H, W, Z map
  to world x, y, z respectively.

Every function accepts broadcastable arrays of points (last axis of size 3).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

NEAR_PLANE = 0.01

# plane name -> (row axis, col axis, dropped axis) in volume axis order (H=0, W=1, Z=2)
PLANE_AXES = {
    "hw": (0, 1, 2),
    "zh": (2, 0, 1),
    "wz": (1, 2, 0),
}


@dataclass(frozen=True, eq=False)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if np.abs(R @ R.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(R) - 1.0) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def moved(self, offset) -> "CameraModel":
        """Same camera with its center translated by a world-frame offset."""
        center = self.center + np.asarray(offset, dtype=np.float64)
        return CameraModel(self.fx, self.fy, self.cx, self.cy, self.width, self.height,
                           self.rotation, -self.rotation @ center)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraModel":
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], int(d["width"]), int(d["height"]),
                   np.array(d["rotation"]), np.array(d["translation"]))


@dataclass(frozen=True)
class VolumeSpec:
    H: int
    W: int
    Z: int
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    def __post_init__(self):
        object.__setattr__(self, "lower", tuple(float(v) for v in self.lower))
        object.__setattr__(self, "upper", tuple(float(v) for v in self.upper))
        if min(self.H, self.W, self.Z) < 1:
            raise ValueError("volume dims must be >= 1")
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("volume upper bounds must exceed lower bounds")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.H, self.W, self.Z

    @property
    def voxel_size(self) -> np.ndarray:
        return (np.array(self.upper) - np.array(self.lower)) / np.array(self.dims)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (np.array(self.lower) + np.array(self.upper))

    def plane_shape(self, plane: str) -> tuple[int, int]:
        r, c, _ = PLANE_AXES[plane]
        return self.dims[r], self.dims[c]

    def to_dict(self) -> dict:
        return {"H": self.H, "W": self.W, "Z": self.Z,
                "lower": list(self.lower), "upper": list(self.upper)}

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeSpec":
        return cls(int(d["H"]), int(d["W"]), int(d["Z"]), tuple(d["lower"]), tuple(d["upper"]))


def project_point(cam: CameraModel, p, near: float = NEAR_PLANE):
    """Project world points to continuous pixel coordinates.

    Returns ``(u, v, depth, valid)`` where depth is camera-frame z and valid
    requires ``depth > near`` and ``(u, v)`` inside ``[0, width] x [0, height]``.
    """
    p = np.asarray(p, dtype=np.float64)
    pc = p @ cam.rotation.T + cam.translation
    z = pc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.fx * pc[..., 0] / z + cam.cx
        v = cam.fy * pc[..., 1] / z + cam.cy
    valid = (z > near) & (u >= 0) & (u <= cam.width) & (v >= 0) & (v <= cam.height)
    return u, v, z, valid


def ray_directions(cam: CameraModel, u, v) -> np.ndarray:
    """Unit world-frame ray directions through continuous pixel coordinates."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d_cam = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    d_cam /= np.linalg.norm(d_cam, axis=-1, keepdims=True)
    return d_cam @ cam.rotation


def unproject_pixel(cam: CameraModel, u, v, d) -> np.ndarray:
    """World point at distance ``d`` along the ray through pixel coords ``(u, v)``."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("unproject_pixel requires d > 0")
    return cam.center + d[..., None] * ray_directions(cam, u, v)


def pixel_grid(cam: CameraModel) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-center coordinates ``(u, v)``, each of shape (height, width)."""
    u, v = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    return u, v


def ray_length_per_z(cam: CameraModel) -> np.ndarray:
    """Factor converting camera-z depth to along-ray distance, per pixel center."""
    u, v = pixel_grid(cam)
    return np.sqrt(((u - cam.cx) / cam.fx) ** 2 + ((v - cam.cy) / cam.fy) ** 2 + 1.0)


def camera_rays_plucker(cam: CameraModel) -> np.ndarray:
    """Per-pixel Plücker coordinates ``(r, o x r)``, shape (height, width, 6)."""
    u, v = pixel_grid(cam)
    r = ray_directions(cam, u, v)
    o = np.broadcast_to(cam.center, r.shape)
    return np.concatenate([r, np.cross(o, r)], axis=-1)


def _check_index(spec: VolumeSpec, idx: np.ndarray, axis: int):
    if np.any(idx < 0) or np.any(idx >= spec.dims[axis]):
        raise IndexError(f"voxel index out of range on axis {axis}")


def voxel_to_world(spec: VolumeSpec, h, w, z) -> np.ndarray:
    """World coordinates of voxel centers."""
    idx = [np.asarray(a) for a in (h, w, z)]
    for axis, a in enumerate(idx):
        _check_index(spec, a, axis)
    lo = np.array(spec.lower)
    vs = spec.voxel_size
    return np.stack([lo[k] + (idx[k] + 0.5) * vs[k] for k in range(3)], axis=-1)


def world_to_grid(spec: VolumeSpec, p) -> np.ndarray:
    """Continuous volume grid coordinates; voxel centers land on integers."""
    p = np.asarray(p, dtype=np.float64)
    return (p - np.array(spec.lower)) / spec.voxel_size - 0.5


def world_to_plane_uv(spec: VolumeSpec, p) -> dict[str, np.ndarray]:
    """Drop-axis projections onto the HW, ZH and WZ planes in grid units.

    Each entry has shape (..., 2) ordered (row, col) of that plane, i.e.
    ``hw -> (h, w)``, ``zh -> (z, h)``, ``wz -> (w, z)``.
    """
    g = world_to_grid(spec, p)
    return {name: g[..., [r, c]] for name, (r, c, _) in PLANE_AXES.items()}


def world_in_volume(spec: VolumeSpec, p):
    """Closed-box containment test."""
    p = np.asarray(p, dtype=np.float64)
    return np.all((p >= np.array(spec.lower)) & (p <= np.array(spec.upper)), axis=-1)


def slice_centers(lo: float, hi: float, n: int) -> np.ndarray:
    return lo + (np.arange(n) + 0.5) * ((hi - lo) / n)


def pillar_points(spec: VolumeSpec, h: int, w: int, n: int) -> np.ndarray:
    """``n`` points along Z at the slice centers of column ``(h, w)``."""
    if n < 1:
        raise ValueError("pillar needs at least one point")
    base = voxel_to_world(spec, h, w, 0)
    pts = np.repeat(base[None], n, axis=0)
    pts[:, 2] = slice_centers(spec.lower[2], spec.upper[2], n)
    return pts


def plane_pillar_points(spec: VolumeSpec, plane: str, n: int) -> np.ndarray:
    """Pillar points for every cell of a plane, along the plane's dropped axis.

    Returns an array of shape (rows, cols, n, 3).
    """
    if n < 1:
        raise ValueError("pillar needs at least one point")
    r_ax, c_ax, d_ax = PLANE_AXES[plane]
    rows, cols = spec.dims[r_ax], spec.dims[c_ax]
    lo, vs = np.array(spec.lower), spec.voxel_size
    pts = np.zeros((rows, cols, n, 3))
    pts[..., r_ax] = (lo[r_ax] + (np.arange(rows) + 0.5) * vs[r_ax])[:, None, None]
    pts[..., c_ax] = (lo[c_ax] + (np.arange(cols) + 0.5) * vs[c_ax])[None, :, None]
    pts[..., d_ax] = slice_centers(spec.lower[d_ax], spec.upper[d_ax], n)[None, None, :]
    return pts


def look_rotation(forward, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation for a camera looking along ``forward``."""
    f = np.asarray(forward, dtype=np.float64)
    f = f / np.linalg.norm(f)
    right = np.cross(f, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(f, right)
    return np.stack([right, down, f], axis=0)


def camera_tensors(cam: CameraModel, dtype=torch.float64) -> dict[str, torch.Tensor]:
    """Torch copies of per-pixel ray origins/directions, shape (H*W, 3)."""
    u, v = pixel_grid(cam)
    r = ray_directions(cam, u, v).reshape(-1, 3)
    o = np.broadcast_to(cam.center, r.shape)
    return {"origins": torch.as_tensor(np.ascontiguousarray(o), dtype=dtype),
            "dirs": torch.as_tensor(r, dtype=dtype)}
