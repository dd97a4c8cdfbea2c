"""Synthetic ego-centric scenes built from simple primitives.

Each primitive has an analytic ray intersection (for exact depth and
visibility) and a surface sampler that turns it into flat Gaussians (for
ground-truth rendering with the library renderer). World is z-up.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from ..geometry import CameraModel, VolumeSpec, look_rotation, pixel_grid, ray_directions
from ..splat.gaussians import SOURCE_VOLUME, GaussianSet

KINDS = ("sphere", "box", "pole", "wall", "backdrop")
LIGHT = np.array([0.4, 0.3, 0.866])
LIGHT = LIGHT / np.linalg.norm(LIGHT)


@dataclass
class Primitive:
    kind: str
    center: tuple[float, float, float]
    size: tuple[float, ...]   # sphere (r,), box (sx, sy, sz), pole (r, height), wall (width, height), backdrop (R,)
    yaw: float = 0.0          # radians about +z
    texture: dict = field(default_factory=lambda: {"type": "albedo", "color": [0.7, 0.7, 0.7]})
    tag: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "center": list(map(float, self.center)), "size": list(map(float, self.size)),
                "yaw": float(self.yaw), "texture": self.texture, "tag": self.tag}

    @classmethod
    def from_dict(cls, d) -> "Primitive":
        return cls(d["kind"], tuple(d["center"]), tuple(d["size"]), d.get("yaw", 0.0), d["texture"], d.get("tag", ""))


@dataclass
class SceneSpec:
    seed: int
    case: str
    primitives: list[Primitive]
    volume: VolumeSpec

    def __post_init__(self):
        if not self.primitives:
            raise ValueError("scene needs at least one primitive")
        for p in self.primitives:
            if p.kind == "backdrop" and p.size[0] <= backdrop_min_radius(self.volume):
                raise ValueError("backdrop must lie outside the volume")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "case": self.case, "primitives": [p.to_dict() for p in self.primitives],
                "volume": self.volume.to_dict()}

    @classmethod
    def from_dict(cls, d) -> "SceneSpec":
        return cls(d["seed"], d["case"], [Primitive.from_dict(p) for p in d["primitives"]],
                   VolumeSpec.from_dict(d["volume"]))

    def index_of(self, tag: str) -> int:
        return next(i for i, p in enumerate(self.primitives) if p.tag == tag)


def backdrop_min_radius(spec: VolumeSpec) -> float:
    """Distance from the origin to the farthest volume corner."""
    c = np.array([[a, b, z] for a in (spec.lower[0], spec.upper[0])
                  for b in (spec.lower[1], spec.upper[1]) for z in (spec.lower[2], spec.upper[2])])
    return float(np.linalg.norm(c, axis=1).max())


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def texture_color(tex: dict, p: np.ndarray, n: np.ndarray | None) -> np.ndarray:
    kind = tex["type"]
    if kind == "albedo":
        col = np.broadcast_to(np.asarray(tex["color"], dtype=np.float64), p.shape).copy()
    elif kind == "checker":
        per = float(tex["period"])
        k = np.floor(p / per).astype(np.int64).sum(axis=-1) & 1
        a, b = np.asarray(tex["color"], dtype=np.float64), np.asarray(tex["color2"], dtype=np.float64)
        col = np.where(k[..., None] == 1, a, b)
    elif kind == "sky":
        az = np.arctan2(p[..., 1], p[..., 0])
        el = np.arctan2(p[..., 2], np.linalg.norm(p[..., :2], axis=-1))
        lo, hi = np.asarray(tex["color"], dtype=np.float64), np.asarray(tex["color2"], dtype=np.float64)
        t = np.clip(0.5 + el / math.radians(50), 0, 1)[..., None]
        band = 0.12 * np.sin(az * tex.get("waves", 5) + tex.get("phase", 0.0))[..., None]
        col = (1 - t) * lo + t * hi + band
    else:
        raise ValueError(f"unknown texture {kind!r}")
    if n is not None and tex.get("shade", True) and kind != "sky":
        col = col * (0.7 + 0.3 * np.clip(n @ LIGHT, 0, 1))[..., None]
    return np.clip(col, 0.02, 0.98)


# ---------------------------------------------------------------------------
# analytic intersection: returns (t, normal) with t = inf on miss
# ---------------------------------------------------------------------------

def _yaw_matrix(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _hit_sphere(o, d, c, r, inside=False):
    oc = o - c
    b = (oc * d).sum(-1)
    cc = (oc * oc).sum(-1) - r * r
    disc = b * b - cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    if inside:
        t = np.where(ok & (t1 > 1e-9), t1, np.inf)
    else:
        t = np.where(ok & (t0 > 1e-9), t0, np.where(ok & (t1 > 1e-9), t1, np.inf))
    p = o + np.where(np.isfinite(t), t, 0)[..., None] * d
    n = (p - c) / r
    return t, -n if inside else n


def _hit_box(o, d, c, size, yaw):
    R = _yaw_matrix(yaw)
    ol = (o - c) @ R
    dl = d @ R
    half = np.asarray(size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
    tmin = np.nanmax(np.minimum(t1, t2), axis=-1)
    tmax = np.nanmin(np.maximum(t1, t2), axis=-1)
    hit = (tmax >= tmin) & (tmax > 1e-9)
    t = np.where(hit, np.where(tmin > 1e-9, tmin, tmax), np.inf)
    pl = ol + np.where(np.isfinite(t), t, 0)[..., None] * dl
    q = np.abs(pl / half)
    ax = np.argmax(q, axis=-1)
    nl = np.zeros_like(pl)
    np.put_along_axis(nl, ax[..., None], np.sign(np.take_along_axis(pl, ax[..., None], -1)), -1)
    return t, nl @ R.T


def _hit_pole(o, d, c, r, height):
    # vertical cylinder from c.z to c.z + height, plus a top cap
    ox, oy = o[..., 0] - c[0], o[..., 1] - c[1]
    dx, dy = d[..., 0], d[..., 1]
    a = dx * dx + dy * dy
    b = ox * dx + oy * dy
    cc = ox * ox + oy * oy - r * r
    disc = b * b - a * cc
    ok = (disc >= 0) & (a > 1e-15)
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-b - np.sqrt(np.where(ok, disc, 0))) / a
    z0 = o[..., 2] + t0 * d[..., 2]
    side = ok & (t0 > 1e-9) & (z0 >= c[2]) & (z0 <= c[2] + height)
    t_side = np.where(side, t0, np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        tc = (c[2] + height - o[..., 2]) / d[..., 2]
    pc = o + np.where(np.isfinite(tc), tc, 0)[..., None] * d
    cap = (tc > 1e-9) & ((pc[..., 0] - c[0]) ** 2 + (pc[..., 1] - c[1]) ** 2 <= r * r)
    t_cap = np.where(cap, tc, np.inf)
    t = np.minimum(t_side, t_cap)
    p = o + np.where(np.isfinite(t), t, 0)[..., None] * d
    n_side = np.stack([p[..., 0] - c[0], p[..., 1] - c[1], np.zeros_like(t)], -1) / r
    n = np.where((t_cap < t_side)[..., None], np.array([0, 0, 1.0]), n_side)
    return t, n


def _hit_wall(o, d, c, width, height, yaw):
    R = _yaw_matrix(yaw)
    nrm = R[:, 0]
    tan = R[:, 1]
    denom = d @ nrm
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((c - o) @ nrm) / denom
    p = o + np.where(np.isfinite(t), t, 0)[..., None] * d
    local = p - c
    ok = (t > 1e-9) & (np.abs(local @ tan) <= width / 2) & (np.abs(local[..., 2]) <= height / 2)
    t = np.where(ok, t, np.inf)
    n = np.where((denom < 0)[..., None], nrm, -nrm)
    return t, n


def intersect(prim: Primitive, o, d):
    c = np.asarray(prim.center, dtype=np.float64)
    if prim.kind == "sphere":
        return _hit_sphere(o, d, c, prim.size[0])
    if prim.kind == "box":
        return _hit_box(o, d, c, prim.size, prim.yaw)
    if prim.kind == "pole":
        return _hit_pole(o, d, c, prim.size[0], prim.size[1])
    if prim.kind == "wall":
        return _hit_wall(o, d, c, prim.size[0], prim.size[1], prim.yaw)
    return _hit_sphere(o, d, c, prim.size[0], inside=True)


def cast_rays(scene: SceneSpec, o, d):
    """Nearest hit over all primitives: (t, primitive id or -1, normal)."""
    best = np.full(d.shape[:-1], np.inf)
    pid = np.full(d.shape[:-1], -1, dtype=np.int64)
    nrm = np.zeros(d.shape)
    for i, prim in enumerate(scene.primitives):
        t, n = intersect(prim, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        pid = np.where(closer, i, pid)
        nrm = np.where(closer[..., None], n, nrm)
    return best, pid, nrm


def camera_cast(scene: SceneSpec, cam: CameraModel):
    """Per-pixel (camera-z depth, primitive id) by analytic ray casting."""
    u, v = pixel_grid(cam)
    d = ray_directions(cam, u, v)
    o = np.broadcast_to(cam.center, d.shape)
    t, pid, _ = cast_rays(scene, o, d)
    z = t * ((d @ cam.rotation.T)[..., 2])
    return np.where(np.isfinite(t), z, np.inf), pid


# ---------------------------------------------------------------------------
# surface samples -> Gaussians
# ---------------------------------------------------------------------------

def _frame_from_normal(n):
    helper = np.where(np.abs(n[:, 2:3]) < 0.9, np.array([0, 0, 1.0]), np.array([1.0, 0, 0]))
    t1 = np.cross(helper, n)
    t1 /= np.linalg.norm(t1, axis=1, keepdims=True)
    t2 = np.cross(n, t1)
    return np.stack([t1, t2, n], axis=-1)  # columns


def rotmat_to_quat(R: np.ndarray) -> np.ndarray:
    """(N, 3, 3) proper rotations -> (N, 4) unit quaternions (w, x, y, z)."""
    m = R
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    cand = np.stack([
        np.stack([1 + tr, m[:, 2, 1] - m[:, 1, 2], m[:, 0, 2] - m[:, 2, 0], m[:, 1, 0] - m[:, 0, 1]], -1),
        np.stack([m[:, 2, 1] - m[:, 1, 2], 1 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2], m[:, 0, 1] + m[:, 1, 0], m[:, 0, 2] + m[:, 2, 0]], -1),
        np.stack([m[:, 0, 2] - m[:, 2, 0], m[:, 0, 1] + m[:, 1, 0], 1 - m[:, 0, 0] + m[:, 1, 1] - m[:, 2, 2], m[:, 1, 2] + m[:, 2, 1]], -1),
        np.stack([m[:, 1, 0] - m[:, 0, 1], m[:, 0, 2] + m[:, 2, 0], m[:, 1, 2] + m[:, 2, 1], 1 - m[:, 0, 0] - m[:, 1, 1] + m[:, 2, 2]], -1),
    ], axis=1)
    k = np.argmax(np.stack([1 + tr, 1 + m[:, 0, 0] - m[:, 1, 1] - m[:, 2, 2],
                            1 - m[:, 0, 0] + m[:, 1, 1] - m[:, 2, 2], 1 - m[:, 0, 0] - m[:, 1, 1] + m[:, 2, 2]], -1), -1)
    q = cand[np.arange(len(k)), k]
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return q * np.where(q[:, :1] < 0, -1.0, 1.0)


def _grid(a_len, b_len, spacing):
    na, nb = max(1, int(math.ceil(a_len / spacing))), max(1, int(math.ceil(b_len / spacing)))
    a = (np.arange(na) + 0.5) / na * a_len - a_len / 2
    b = (np.arange(nb) + 0.5) / nb * b_len - b_len / 2
    A, B = np.meshgrid(a, b, indexing="ij")
    return A.reshape(-1), B.reshape(-1), a_len / na, b_len / nb


def surface_samples(prim: Primitive, spacing: float):
    """Points, normals and (tangent-1, tangent-2) spacings on the primitive surface."""
    c = np.asarray(prim.center, dtype=np.float64)
    if prim.kind in ("sphere", "backdrop"):
        r = prim.size[0]
        if prim.kind == "sphere":
            n_pts = max(8, int(4 * math.pi * r * r / spacing ** 2))
            i = np.arange(n_pts) + 0.5
            phi = np.arccos(1 - 2 * i / n_pts)
            th = math.pi * (1 + 5 ** 0.5) * i
            n = np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], -1)
            step = np.full(n_pts, math.sqrt(4 * math.pi / n_pts) * r)
            return c + r * n, n, step, step
        el_max = math.radians(prim.texture.get("band_deg", 30.0))
        ang = spacing / r
        n_az = int(math.ceil(2 * math.pi / ang))
        n_el = int(math.ceil(2 * el_max / ang))
        az = (np.arange(n_az) + 0.5) / n_az * 2 * math.pi
        el = (np.arange(n_el) + 0.5) / n_el * 2 * el_max - el_max
        AZ, EL = np.meshgrid(az, el, indexing="ij")
        AZ, EL = AZ.reshape(-1), EL.reshape(-1)
        dirs = np.stack([np.cos(EL) * np.cos(AZ), np.cos(EL) * np.sin(AZ), np.sin(EL)], -1)
        return c + r * dirs, -dirs, r * np.cos(EL) * (2 * math.pi / n_az), np.full(AZ.shape, r * 2 * el_max / n_el)
    if prim.kind == "wall":
        w, h = prim.size
        A, B, sa, sb = _grid(w, h, spacing)
        R = _yaw_matrix(prim.yaw)
        p = c + A[:, None] * R[:, 1] + B[:, None] * np.array([0, 0, 1.0])
        return p, np.broadcast_to(R[:, 0], p.shape).copy(), np.full(A.shape, sa), np.full(A.shape, sb)
    if prim.kind == "box":
        R = _yaw_matrix(prim.yaw)
        half = np.asarray(prim.size) / 2
        pts, nrm, s1, s2 = [], [], [], []
        for ax in range(3):
            o1, o2 = [k for k in range(3) if k != ax]
            A, B, sa, sb = _grid(2 * half[o1], 2 * half[o2], spacing)
            for sgn in (-1.0, 1.0):
                pl = np.zeros((A.size, 3))
                pl[:, ax] = sgn * half[ax]
                pl[:, o1], pl[:, o2] = A, B
                nl = np.zeros(3)
                nl[ax] = sgn
                pts.append(c + pl @ R.T)
                nrm.append(np.broadcast_to(R @ nl, pl.shape))
                s1.append(np.full(A.size, sa))
                s2.append(np.full(A.size, sb))
        return np.concatenate(pts), np.concatenate(nrm), np.concatenate(s1), np.concatenate(s2)
    # pole
    r, h = prim.size
    A, B, sa, sb = _grid(2 * math.pi * r, h, spacing)
    th = A / r
    n = np.stack([np.cos(th), np.sin(th), np.zeros_like(th)], -1)
    p = c + r * n + (B + h / 2)[:, None] * np.array([0, 0, 1.0])
    cap_n = max(1, int(math.pi * r * r / spacing ** 2))
    rr = r * np.sqrt((np.arange(cap_n) + 0.5) / cap_n)
    ang = np.arange(cap_n) * math.pi * (3 - 5 ** 0.5)
    cp = c + np.stack([rr * np.cos(ang), rr * np.sin(ang), np.full(cap_n, h)], -1)
    cs = math.sqrt(math.pi * r * r / cap_n)
    return (np.concatenate([p, cp]), np.concatenate([n, np.tile([0, 0, 1.0], (cap_n, 1))]),
            np.concatenate([np.full(A.size, sa), np.full(cap_n, cs)]), np.concatenate([np.full(A.size, sb), np.full(cap_n, cs)]))


def primitive_spacing(prim: Primitive, rig_center, focal: float, fraction: float = 0.7) -> float:
    """Sample spacing as a fraction of the pixel footprint at the primitive's nearest distance."""
    c = np.asarray(prim.center, dtype=np.float64)
    if prim.kind == "backdrop":
        dist = prim.size[0]
    else:
        extent = max(prim.size) if prim.kind != "pole" else prim.size[0]
        dist = max(np.linalg.norm((c - np.asarray(rig_center))[:2]) - extent, 1.0)
    return max(fraction * dist / focal, 0.01)


def scene_gaussians(scene: SceneSpec, rig_center, focal: float, opacity: float = 0.98,
                    dtype=torch.float64) -> GaussianSet:
    means, quats, scales, cols = [], [], [], []
    for prim in scene.primitives:
        sp = primitive_spacing(prim, rig_center, focal)
        p, n, s1, s2 = surface_samples(prim, sp)
        R = _frame_from_normal(n)
        means.append(p)
        quats.append(rotmat_to_quat(R))
        scales.append(np.stack([0.6 * s1, 0.6 * s2, 0.05 * np.minimum(s1, s2)], -1))
        cols.append(texture_color(prim.texture, p, n))
    t = lambda a: torch.as_tensor(np.concatenate(a), dtype=dtype)
    m = t(means)
    return GaussianSet(m, torch.full((m.shape[0],), opacity, dtype=dtype), t(scales), t(quats), t(cols),
                       torch.full((m.shape[0],), SOURCE_VOLUME, dtype=torch.long))


# ---------------------------------------------------------------------------
# rig and case factories
# ---------------------------------------------------------------------------

def rig_overlap_fraction(hfov_deg: float, K: int) -> float:
    if K == 1:
        return 0.0
    return max(hfov_deg - 360.0 / K, 0.0) / hfov_deg


def make_ego_rig(width: int, height: int, hfov_deg: float = 70.0, K: int = 6, center=(0.0, 0.0, 0.5),
                 yaw0: float = 0.0, max_overlap: float = 0.15) -> list[CameraModel]:
    """K outward cameras at yaw steps of 360/K around a shared optical center."""
    if K < 1:
        raise ValueError("K must be >= 1")
    ov = rig_overlap_fraction(hfov_deg, K)
    if ov >= max_overlap:
        raise ValueError(f"adjacent overlap {ov:.3f} violates the {max_overlap} limit")
    fx = (width / 2) / math.tan(math.radians(hfov_deg) / 2)
    c = np.asarray(center, dtype=np.float64)
    cams = []
    for k in range(K):
        yaw = yaw0 + 2 * math.pi * k / K
        R = look_rotation((math.cos(yaw), math.sin(yaw), 0.0))
        cams.append(CameraModel(fx, fx, width / 2, height / 2, width, height, R, -R @ c))
    return cams


def _bearing(a):
    return np.array([math.cos(a), math.sin(a)])


def _random_color(rng):
    return list(np.clip(rng.uniform(0.1, 0.9, 3), 0, 1))


def _random_texture(rng, fine=False):
    if fine or rng.random() < 0.5:
        period = rng.uniform(0.25, 0.4) if fine else rng.uniform(0.4, 0.9)
        return {"type": "checker", "period": float(period), "color": _random_color(rng), "color2": _random_color(rng)}
    return {"type": "albedo", "color": _random_color(rng)}


def _backdrop(rng, spec: VolumeSpec):
    r = backdrop_min_radius(spec) * 1.75
    return Primitive("backdrop", (0.0, 0.0, 0.0), (r,), texture={
        "type": "sky", "color": _random_color(rng), "color2": _random_color(rng),
        "waves": int(rng.integers(3, 8)), "phase": float(rng.uniform(0, 2 * math.pi)), "band_deg": 30.0},
        tag="backdrop")


def _filler(rng, n, spec, z_floor, avoid):
    """Random spheres/boxes at 3-9 m that keep clear of the bearings in ``avoid``."""
    prims = []
    tries = 0
    while len(prims) < n and tries < 200:
        tries += 1
        a = rng.uniform(0, 2 * math.pi)
        if any(abs(math.remainder(a - b, 2 * math.pi)) < w for b, w in avoid):
            continue
        dist = rng.uniform(3.5, 8.5)
        xy = dist * _bearing(a)
        if rng.random() < 0.5:
            r = rng.uniform(0.4, 0.9)
            prims.append(Primitive("sphere", (xy[0], xy[1], z_floor + r), (r,), texture=_random_texture(rng)))
        else:
            s = rng.uniform(0.6, 1.6, 3)
            prims.append(Primitive("box", (xy[0], xy[1], z_floor + s[2] / 2), tuple(s), yaw=rng.uniform(0, math.pi),
                                   texture=_random_texture(rng)))
        avoid = avoid + [(a, math.atan2(1.2, dist))]
    return prims, avoid


@dataclass(frozen=True)
class SceneConfig:
    width: int = 112
    height: int = 64
    hfov_deg: float = 70.0
    K: int = 6
    bin_size: float = 0.8
    cam_height: float = 0.5
    volume: VolumeSpec = VolumeSpec(32, 32, 8, (-10.0, -10.0, -0.6), (10.0, 10.0, 2.4))

    def rig(self, center_xy=(0.0, 0.0), yaw0=0.0):
        return make_ego_rig(self.width, self.height, self.hfov_deg, self.K,
                            (center_xy[0], center_xy[1], self.cam_height), yaw0)

    @property
    def focal(self) -> float:
        return (self.width / 2) / math.tan(math.radians(self.hfov_deg) / 2)


def _occlusion_pair(rng, cfg: SceneConfig, traj_angle: float, z_floor: float):
    """Near occluder plus an object hidden in its shadow from the rig center."""
    side = rng.choice([-1.0, 1.0])
    bearing = traj_angle + side * math.pi / 2 + rng.uniform(-0.25, 0.25)
    d_occ = rng.uniform(1.8, 2.4)
    w_occ = rng.uniform(1.4, 1.8)
    h_occ = rng.uniform(2.2, 2.8)
    occ_c = d_occ * _bearing(bearing)
    occ = Primitive("box", (occ_c[0], occ_c[1], z_floor + h_occ / 2), (0.5, w_occ, h_occ), yaw=bearing,
                    texture=_random_texture(rng), tag="occluder")
    d_hid = rng.uniform(8.0, 9.0)
    shadow = w_occ / 2 * d_hid / d_occ
    w_hid = rng.uniform(0.8, 1.2)
    lat_dir = np.array([-math.sin(bearing), math.cos(bearing)])
    # push toward the side that the novel rig at +traj sees around
    along = np.dot(_bearing(traj_angle), lat_dir)
    sgn = 1.0 if along >= 0 else -1.0
    lat = sgn * (shadow - w_hid / 2 - rng.uniform(0.15, 0.35))
    hid_c = d_hid * _bearing(bearing) + lat * lat_dir
    h_hid = rng.uniform(1.6, 2.2)
    hid = Primitive("box", (hid_c[0], hid_c[1], z_floor + h_hid / 2), (w_hid, w_hid, h_hid), yaw=bearing,
                    texture=_random_texture(rng), tag="hidden")
    return [occ, hid], (bearing, math.atan2(shadow + 1.0, d_hid))


def _pole(rng, cfg: SceneConfig, z_floor: float, avoid):
    for _ in range(100):
        a = rng.uniform(0, 2 * math.pi)
        if not any(abs(math.remainder(a - b, 2 * math.pi)) < w for b, w in avoid):
            break
    dist = rng.uniform(6.0, 8.0)
    xy = dist * _bearing(a)
    top = cfg.cam_height + dist * (cfg.height / 2) / cfg.focal  # input-frustum top at that range
    h = top - z_floor + rng.uniform(1.0, 2.0)
    pole = Primitive("pole", (xy[0], xy[1], z_floor), (rng.uniform(0.12, 0.2), h), texture={
        "type": "albedo", "color": _random_color(rng)}, tag="pole")
    return pole, avoid + [(a, math.atan2(0.6, dist))]


def _detail_wall(rng, cfg: SceneConfig, avoid):
    for _ in range(100):
        a = rng.uniform(0, 2 * math.pi)
        if not any(abs(math.remainder(a - b, 2 * math.pi)) < w for b, w in avoid):
            break
    dist = rng.uniform(4.5, 6.5)
    xy = dist * _bearing(a)
    w, h = rng.uniform(2.5, 3.5), rng.uniform(1.8, 2.6)
    wall = Primitive("wall", (xy[0], xy[1], cfg.volume.lower[2] + 0.1 + h / 2), (w, h), yaw=a + math.pi,
                     texture=_random_texture(rng, fine=True), tag="wall")
    return wall, avoid + [(a, math.atan2(w / 2 + 0.5, dist))]


CASES = ("1", "2", "3", "4", "mix")


def build_scene(case: str, seed: int, cfg: SceneConfig = SceneConfig()):
    """Scene primitives plus the bin's trajectory angle and rig yaw."""
    if case not in CASES:
        raise ValueError(f"unknown case {case!r}")
    rng = np.random.default_rng(seed)
    traj = float(rng.uniform(0, 2 * math.pi))
    yaw0 = float(rng.uniform(0, 2 * math.pi / cfg.K))
    z_floor = cfg.volume.lower[2] + 0.1
    prims: list[Primitive] = []
    avoid = []
    if case in ("1", "mix"):
        pair, av = _occlusion_pair(rng, cfg, traj, z_floor)
        prims += pair
        avoid.append(av)
    if case in ("2", "mix"):
        pole, avoid = _pole(rng, cfg, z_floor, avoid)
        prims.append(pole)
    if case in ("4", "mix"):
        wall, avoid = _detail_wall(rng, cfg, avoid)
        prims.append(wall)
    n_fill = {"1": 3, "2": 3, "3": 1, "4": 2, "mix": 2}[case]
    fill, avoid = _filler(rng, n_fill, cfg.volume, z_floor, avoid)
    prims += fill
    prims.append(_backdrop(rng, cfg.volume))
    return SceneSpec(seed, case, prims, cfg.volume), traj, yaw0
