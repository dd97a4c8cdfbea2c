"""Triplane transformer and voxel-anchored Gaussian decoder.

Plane queries attend to the K input views through cross-image deformable
attention (CIDA) and to each other through cross-plane deformable attention
(CPDA). The decoder sums bilinear samples of the three planes at every voxel
center and maps them to V Gaussians per voxel with a three-layer MLP.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffcore import ops
from .diffcore.layers import LayerNorm, Linear
from .diffcore.ops import bilinear_sample_2d, scatter_mean
from .geometry import (CameraModel, VolumeSpec, plane_pillar_points, project_point,
                       voxel_to_world, world_to_plane_uv)
from .splat.gaussians import SOURCE_VOLUME, GaussianSet

PLANES = ("hw", "zh", "wz")
GAUSSIAN_DIM = 14  # offset 3, opacity 1, scale 3, quaternion 4, color 3
# voxel Gaussians start nearly transparent so they do not veil the scene before training
VOXEL_OPACITY_BIAS = -5.0


@dataclass
class Triplane:
    hw: torch.Tensor  # (H, W, C)
    zh: torch.Tensor  # (Z, H, C)
    wz: torch.Tensor  # (W, Z, C)
    spec: VolumeSpec

    def __post_init__(self):
        for name in PLANES:
            t = getattr(self, name)
            if tuple(t.shape[:2]) != self.spec.plane_shape(name):
                raise ValueError(f"plane {name} has shape {tuple(t.shape)}, expected {self.spec.plane_shape(name)}")
        if not (self.hw.shape[-1] == self.zh.shape[-1] == self.wz.shape[-1] > 0):
            raise ValueError("planes disagree on channel count")

    @property
    def channels(self) -> int:
        return self.hw.shape[-1]

    def __getitem__(self, name: str) -> torch.Tensor:
        return getattr(self, name)

    def as_dict(self) -> dict[str, torch.Tensor]:
        return {n: getattr(self, n) for n in PLANES}

    def replace(self, **planes) -> "Triplane":
        d = self.as_dict()
        d.update(planes)
        return Triplane(spec=self.spec, **d)


@dataclass(frozen=True)
class DeformAttnConfig:
    n_heads: int = 8
    n_points_2d: tuple[int, ...] = (4, 8, 8)  # per layer
    n_points_3d: tuple[int, ...] = (4, 4, 4)  # per layer, per plane
    n_pillar: int = 4
    offset_scale: float = 4.0

    def __post_init__(self):
        counts = [self.n_heads, self.n_pillar, *self.n_points_2d, *self.n_points_3d]
        if min(counts) < 1:
            raise ValueError("attention counts must be >= 1")
        if min(self.n_points_2d) < self.n_pillar:
            # every pillar reference needs at least one sampling point
            raise ValueError("n_points_2d must be >= n_pillar")


@dataclass
class ReferencePointSet:
    """Pairs of (plane query, correlated view) with their projected pillars.

    ``coords`` are continuous (row, col) positions on the view's feature grid.
    """

    query: torch.Tensor    # (P,) flat query index on the plane
    view: torch.Tensor     # (P,)
    coords: torch.Tensor   # (P, n_pillar, 2)
    valid: torch.Tensor    # (P, n_pillar) bool
    k_prime: torch.Tensor  # (n_queries,) correlated view count
    n_queries: int


@dataclass
class PlaneReferencePointSet:
    """3D references for every query of one plane: own plane first, then the other two."""

    plane: str
    planes: tuple[str, str, str]
    coords: torch.Tensor  # (n_queries, 3, n_points, 2)


def _feature_coords(u, v, factor: float):
    # pixel coords -> feature-grid (row, col) with node (i, j) at pixel center of cell
    return np.stack([v / factor - 0.5, u / factor - 0.5], axis=-1)


def build_reference_points_2d(spec: VolumeSpec, cams: list[CameraModel], n_pillar: int,
                              plane: str = "hw", factor: float = 1.0,
                              positions=None) -> ReferencePointSet:
    """Project each query's pillar into every camera and keep correlated views.

    ``positions`` optionally restricts to a list of (row, col) plane cells; the
    query index is then the position in that list.
    """
    if len(cams) < 1:
        raise ValueError("need at least one camera")
    pts = plane_pillar_points(spec, plane, n_pillar)
    rows, cols = pts.shape[:2]
    if positions is None:
        pts = pts.reshape(rows * cols, n_pillar, 3)
    else:
        pos = np.asarray(positions, dtype=np.int64).reshape(-1, 2)
        pts = pts[pos[:, 0], pos[:, 1]]
    nq = pts.shape[0]
    q_all, v_all, c_all, m_all = [], [], [], []
    k_prime = np.zeros(nq, dtype=np.int64)
    for k, cam in enumerate(cams):
        u, v, _, valid = project_point(cam, pts)
        hit = valid.any(axis=1)
        k_prime += hit
        idx = np.nonzero(hit)[0]
        q_all.append(idx)
        v_all.append(np.full(idx.shape, k))
        c_all.append(np.clip(np.nan_to_num(_feature_coords(u[idx], v[idx], factor)), -1e4, 1e4))
        m_all.append(valid[idx])
    q = np.concatenate(q_all)
    order = np.argsort(q, kind="stable")  # group pairs by query, views ascending
    return ReferencePointSet(
        query=torch.as_tensor(q[order]),
        view=torch.as_tensor(np.concatenate(v_all)[order]),
        coords=torch.as_tensor(np.concatenate(c_all)[order]),
        valid=torch.as_tensor(np.concatenate(m_all)[order]),
        k_prime=torch.as_tensor(k_prime),
        n_queries=nq,
    )


def build_reference_points_3d(spec: VolumeSpec, n_points: int, plane: str = "hw") -> PlaneReferencePointSet:
    """Own-cell references repeated ``n_points`` times plus pillar projections on the other planes."""
    others = tuple(p for p in PLANES if p != plane)
    pts = plane_pillar_points(spec, plane, n_points)
    rows, cols = pts.shape[:2]
    uv = world_to_plane_uv(spec, pts.reshape(-1, 3))
    own = np.stack(np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij"), -1).astype(np.float64)
    own = np.repeat(own.reshape(rows * cols, 1, 2), n_points, axis=1)
    blocks = [own] + [uv[o].reshape(rows * cols, n_points, 2) for o in others]
    return PlaneReferencePointSet(plane, (plane, *others), torch.as_tensor(np.stack(blocks, axis=1)))


class DeformAttn(nn.Module):
    """Multi-head deformable attention: offsets and point weights predicted from the query."""

    def __init__(self, c_query: int, c_value: int, n_heads: int, n_points: int, offset_scale: float):
        super().__init__()
        if c_query % n_heads:
            raise ValueError("channels must divide by heads")
        self.n_heads, self.n_points, self.offset_scale = n_heads, n_points, offset_scale
        self.offsets = Linear(c_query, n_heads * n_points * 2)
        self.weights = Linear(c_query, n_heads * n_points)
        self.value = Linear(c_value, c_query)
        self.out = Linear(c_query, c_query)

    def sample_params(self, q):
        n = q.shape[0]
        off = ops.tanh(self.offsets(q)).reshape(n, self.n_heads, self.n_points, 2) * self.offset_scale
        logits = self.weights(q).reshape(n, self.n_heads, self.n_points)
        return off, logits

    def head_values(self, x):
        """(..., R, C_in, C_v) grid -> (heads, R, C, C/heads) value grid."""
        v = self.value(x)
        r, c, ch = v.shape[-3:]
        v = v.reshape(*v.shape[:-3], r, c, self.n_heads, ch // self.n_heads)
        return v.movedim(-2, -4)

    def combine(self, weights, samples):
        """weights (N, heads, pts), samples (N, heads, pts, Ch) -> projected (N, C)."""
        heads = (weights[..., None] * samples).sum(dim=2)
        return self.out(heads.reshape(heads.shape[0], -1))


def _masked_softmax(logits, valid):
    neg = torch.full_like(logits, -math.inf)
    return ops.softmax(torch.where(valid, logits, neg), dim=-1)


def cida_per_view(q, refs: ReferencePointSet, values, attn: DeformAttn, n_pillar: int):
    """Per (query, correlated view) DA outputs, shape (P, C).

    ``values`` is the head-split value grid (K, heads, Hf, Wf, Ch).
    """
    P = refs.query.shape[0]
    if P == 0:
        return q.new_zeros(0, q.shape[-1])
    off, logits = attn.sample_params(q)
    heads, npts = attn.n_heads, attn.n_points
    slot = torch.arange(npts) % n_pillar
    base = refs.coords.to(q.dtype)[:, slot]                       # (P, pts, 2)
    valid = refs.valid[:, slot][:, None, :].expand(P, heads, npts)
    w = _masked_softmax(logits[refs.query], valid)
    loc = base[:, None] + off[refs.query]                         # (P, heads, pts, 2)
    K, _, Hf, Wf, Ch = values.shape
    batch = (refs.view[:, None, None] * heads + torch.arange(heads)[None, :, None]).expand(P, heads, npts)
    s = bilinear_sample_2d(values.reshape(K * heads, Hf, Wf, Ch), loc.reshape(-1, 2), batch.reshape(-1))
    return attn.combine(w, s.reshape(P, heads, npts, Ch))


def cida(q, refs: ReferencePointSet, values, attn: DeformAttn, n_pillar: int):
    """Cross-image deformable attention, averaged over the K' correlated views.

    Returns the aggregate only; queries without correlated views get zeros so
    a residual ``q + cida(...)`` leaves them exactly unchanged.
    """
    per_view = cida_per_view(q, refs, values, attn, n_pillar)
    mean, _ = scatter_mean(per_view, refs.query, refs.n_queries)
    return mean


def cpda(q, refs: PlaneReferencePointSet, values: dict[str, torch.Tensor], attn: DeformAttn):
    """Cross-plane deformable attention over all points of the three planes jointly.

    ``values[name]`` is a head-split value grid (heads, R, C, Ch).
    """
    n = q.shape[0]
    off, logits = attn.sample_params(q)
    heads, npts = attn.n_heads, attn.n_points  # npts = 3 * points per plane
    per = npts // 3
    w = ops.softmax(logits, dim=-1)
    base = refs.coords.to(q.dtype).reshape(n, npts, 2)
    loc = base[:, None] + off                                     # (n, heads, pts, 2)
    hidx = torch.arange(heads)[None, :, None].expand(n, heads, per).reshape(-1)
    parts = []
    for b, name in enumerate(refs.planes):
        vals = values[name]  # (heads, R, C, Ch)
        l = loc[:, :, b * per:(b + 1) * per].reshape(-1, 2)
        parts.append(bilinear_sample_2d(vals, l, hidx).reshape(n, heads, per, -1))
    return attn.combine(w, ops.concat(parts, dim=2))


class FeedForward(nn.Module):
    def __init__(self, c: int, mult: int = 4):
        super().__init__()
        self.fc1 = Linear(c, c * mult)
        self.fc2 = Linear(c * mult, c)

    def forward(self, x):
        return self.fc2(ops.silu(self.fc1(x)))


class TriplaneLayer(nn.Module):
    """Pre-norm residual block: [CIDA ->] CPDA -> feed-forward."""

    def __init__(self, c: int, c_feat: int, cfg: DeformAttnConfig, n2d: int, n3d: int, with_cida: bool):
        super().__init__()
        self.with_cida = with_cida
        if with_cida:
            self.norm_cida = LayerNorm(c)
            self.cida = DeformAttn(c, c_feat, cfg.n_heads, n2d, cfg.offset_scale)
        self.norm_cpda = LayerNorm(c)
        self.cpda = DeformAttn(c, c, cfg.n_heads, 3 * n3d, cfg.offset_scale)
        self.norm_ffn = LayerNorm(c)
        self.ffn = FeedForward(c)
        self.n_pillar = cfg.n_pillar

    def forward(self, planes: Triplane, feats, refs2d, refs3d):
        spec = planes.spec
        flat = {n: planes[n].reshape(-1, planes.channels) for n in PLANES}
        if self.with_cida:
            vals = self.cida.head_values(feats)  # (K, heads, Hf, Wf, Ch)
            flat = {n: q + cida(self.norm_cida(q), refs2d[n], vals, self.cida, self.n_pillar)
                    for n, q in flat.items()}
        normed = {n: self.norm_cpda(q) for n, q in flat.items()}
        vals3 = {n: self.cpda.head_values(normed[n].reshape(*spec.plane_shape(n), -1)) for n in PLANES}
        flat = {n: q + cpda(normed[n], refs3d[n], vals3, self.cpda) for n, q in flat.items()}
        flat = {n: q + self.ffn(self.norm_ffn(q)) for n, q in flat.items()}
        return planes.replace(**{n: flat[n].reshape(*spec.plane_shape(n), -1) for n in PLANES})


class TriplaneEncoder(nn.Module):
    """Learnable plane queries refined by a stack of deformable-attention layers."""

    def __init__(self, spec: VolumeSpec, c: int, c_feat: int, cfg: DeformAttnConfig,
                 layer_kinds: tuple[str, ...] = ("cida+cpda", "cida+cpda", "cpda")):
        super().__init__()
        if not layer_kinds:
            raise ValueError("need at least one layer")
        self.spec, self.c, self.cfg = spec, c, cfg
        self.queries = nn.ParameterDict({
            n: nn.Parameter(torch.randn(*spec.plane_shape(n), c, dtype=ops.DEFAULT_DTYPE) * 0.02) for n in PLANES})
        self.extra_init_specs = {f"queries.{n}": "normal(0, 0.02)" for n in PLANES}
        layers = []
        for i, kind in enumerate(layer_kinds):
            n2d = cfg.n_points_2d[min(i, len(cfg.n_points_2d) - 1)]
            n3d = cfg.n_points_3d[min(i, len(cfg.n_points_3d) - 1)]
            layers.append(TriplaneLayer(c, c_feat, cfg, n2d, n3d, with_cida=kind.startswith("cida")))
        self.layers = nn.ModuleList(layers)
        self._refs3d = {n: build_reference_points_3d(spec, max(cfg.n_points_3d), n) for n in PLANES}

    def initial_planes(self) -> Triplane:
        return Triplane(spec=self.spec, **{n: self.queries[n] for n in PLANES})

    def refs3d(self, n3d: int):
        if n3d == max(self.cfg.n_points_3d):
            return self._refs3d
        return {n: build_reference_points_3d(self.spec, n3d, n) for n in PLANES}

    def forward(self, feats, refs2d, planes: Triplane | None = None) -> Triplane:
        planes = self.initial_planes() if planes is None else planes
        for layer in self.layers:
            planes = layer(planes, feats, refs2d, self.refs3d(layer.cpda.n_points // 3))
        return planes


def build_view_references(spec: VolumeSpec, cams, cfg: DeformAttnConfig, factor: float):
    return {n: build_reference_points_2d(spec, cams, cfg.n_pillar, n, factor) for n in PLANES}


def triplane_encode(feats, cams, spec: VolumeSpec, encoder: TriplaneEncoder, factor: float,
                    planes: Triplane | None = None) -> Triplane:
    """Run the layer stack on (K, Hf, Wf, Cf) features seen by ``cams``."""
    refs2d = build_view_references(spec, cams, encoder.cfg, factor)
    return encoder(feats, refs2d, planes)


def sample_triplane_feature(planes: Triplane, p) -> torch.Tensor:
    """Sum of bilinear samples of the three planes at world points ``p`` (N, 3)."""
    pts = p.detach().cpu().numpy() if isinstance(p, torch.Tensor) else np.asarray(p, dtype=np.float64)
    uv = world_to_plane_uv(planes.spec, pts.reshape(-1, 3))
    out = None
    for n in PLANES:
        s = bilinear_sample_2d(planes[n], torch.as_tensor(uv[n], dtype=planes[n].dtype))
        out = s if out is None else out + s
    return out


def voxel_centers(spec: VolumeSpec) -> np.ndarray:
    """All voxel centers in (h, w, z) raster order, shape (H*W*Z, 3)."""
    h, w, z = np.meshgrid(*(np.arange(d) for d in spec.dims), indexing="ij")
    return voxel_to_world(spec, h.reshape(-1), w.reshape(-1), z.reshape(-1))


class VoxelGaussianHead(nn.Module):
    """Three linear layers mapping a voxel feature to V raw Gaussian parameter groups."""

    def __init__(self, c: int, hidden: int, n_gaussians: int = 3):
        super().__init__()
        self.n_gaussians = n_gaussians
        self.fc1 = Linear(c, hidden)
        self.fc2 = Linear(hidden, hidden)
        self.fc3 = Linear(hidden, n_gaussians * GAUSSIAN_DIM)

    def forward(self, f):
        return self.fc3(ops.silu(self.fc2(ops.silu(self.fc1(f)))))


def scale_bias(target):
    """Inverse softplus, so that zero raw maps to ``target``."""
    t = np.asarray(target, dtype=np.float64)
    return t + np.log(-np.expm1(-t))


def activate_voxel_gaussians(raw, centers, voxel_size, opacity_bias: float = VOXEL_OPACITY_BIAS):
    """raw (N, V, 14), centers (N, 3) -> activated parameter tensors (N*V, ...)."""
    dtype = raw.dtype
    vs = torch.as_tensor(voxel_size, dtype=dtype)
    s0 = torch.as_tensor(scale_bias(0.5 * np.asarray(voxel_size)), dtype=dtype)
    n, V, _ = raw.shape
    delta = ops.tanh(raw[..., 0:3]) * (vs / 2)
    means = torch.as_tensor(centers, dtype=dtype)[:, None, :] + delta
    opac = ops.sigmoid(raw[..., 3] + opacity_bias)
    scales = ops.softplus(raw[..., 4:7] + s0)
    q = raw[..., 7:11] + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype)
    q = q / q.norm(dim=-1, keepdim=True)
    col = ops.sigmoid(raw[..., 11:14])
    f = lambda t: t.reshape(n * V, *t.shape[2:])
    return f(means), f(opac), f(scales), f(q), f(col)


def decode_voxel_gaussians(planes: Triplane, head: VoxelGaussianHead, chunk: int = 8192) -> GaussianSet:
    spec = planes.spec
    centers = voxel_centers(spec)
    parts = []
    for s in range(0, centers.shape[0], chunk):
        c = centers[s:s + chunk]
        raw = head(sample_triplane_feature(planes, c)).reshape(c.shape[0], head.n_gaussians, GAUSSIAN_DIM)
        parts.append(activate_voxel_gaussians(raw, c, spec.voxel_size))
    cols = [torch.cat(t, 0) if len(parts) > 1 else t[0] for t in zip(*parts)]
    means, opac, scales, quats, colors = cols
    src = torch.full((means.shape[0],), SOURCE_VOLUME, dtype=torch.long)
    return GaussianSet(means, opac, scales, quats, colors, src)
