"""EWA projection and front-to-back alpha compositing.

Two compositors share one per-pair alpha kernel:

* ``render`` - tiled (16x16) dense evaluation with per-tile splat lists,
  transmittance early stop and a hand-written backward pass that recomputes
  the per-tile pair matrices instead of storing them;
* ``brute_force_render`` - every valid splat against every pixel in depth
  order with sequential accumulation, differentiated by plain autograd.

With early stop disabled the two agree bit for bit.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, replace

import torch
from torch.autograd.function import once_differentiable

from ..geometry import NEAR_PLANE, CameraModel
from .gaussians import GaussianSet, covariance_3d

DEPTH_EPS = 1e-8
JACOBIAN_FOV_CLAMP = 1.3
# exp() below about -87 underflows in float32 and takes a very slow path; the floor keeps
# the falloff a normal number that the 1/255 skip then discards
POWER_FLOOR = -80.0


@dataclass(frozen=True)
class RenderSettings:
    skip_alpha: float = 1.0 / 255.0
    max_alpha: float = 0.999
    t_min: float = 1e-4
    tile: int = 16
    chunk: int = 512
    cov_reg: float = 0.3
    near: float = NEAR_PLANE
    # accumulate color/depth one splat at a time, in the oracle's order, instead of
    # with BLAS reductions (identical up to rounding)
    ordered_sums: bool = False

    @classmethod
    def exact(cls, **kw) -> "RenderSettings":
        """No alpha skipping, no early stop, oracle summation order."""
        kw.setdefault("ordered_sums", True)
        return cls(skip_alpha=0.0, t_min=0.0, **kw)

    def without_early_stop(self) -> "RenderSettings":
        return replace(self, t_min=0.0)


@dataclass
class RenderOutput:
    rgb: torch.Tensor    # (H, W, 3)
    depth: torch.Tensor  # (H, W) expected camera-z depth
    alpha: torch.Tensor  # (H, W) accumulated opacity


@dataclass
class Projected:
    mean2d: torch.Tensor   # (N, 2) pixel coords (u, v)
    cov2d: torch.Tensor    # (N, 2, 2)
    conic: torch.Tensor    # (N, 3) inverse covariance (a, b, c)
    depth: torch.Tensor    # (N,)
    radius3: torch.Tensor  # (N,) 3-sigma radius in pixels
    valid: torch.Tensor    # (N,) bool


def _cam_tensors(cam: CameraModel, dtype):
    R = torch.as_tensor(cam.rotation, dtype=dtype)
    t = torch.as_tensor(cam.translation, dtype=dtype)
    return R, t


def project_splats(gs: GaussianSet, cam: CameraModel, settings: RenderSettings = RenderSettings()) -> Projected:
    """EWA projection ``J W Sigma W^T J^T + reg*I`` of every Gaussian."""
    dtype = gs.means.dtype
    R, t = _cam_tensors(cam, dtype)
    pc = gs.means @ R.T + t
    x, y, z = pc.unbind(-1)
    in_front = z > settings.near
    zs = torch.where(in_front, z, torch.ones_like(z))
    u = cam.fx * x / zs + cam.cx
    v = cam.fy * y / zs + cam.cy
    zero = torch.zeros_like(zs)
    # the affine approximation is taken at a point clamped to 1.3x the half field of view,
    # so far off-axis splats grazing the camera plane keep a bounded footprint
    lim_x = JACOBIAN_FOV_CLAMP * (cam.width / 2) / cam.fx
    lim_y = JACOBIAN_FOV_CLAMP * (cam.height / 2) / cam.fy
    jx = torch.clamp(x / zs, -lim_x, lim_x) * zs
    jy = torch.clamp(y / zs, -lim_y, lim_y) * zs
    J = torch.stack([
        torch.stack([cam.fx / zs, zero, -cam.fx * jx / (zs * zs)], -1),
        torch.stack([zero, cam.fy / zs, -cam.fy * jy / (zs * zs)], -1),
    ], dim=-2)
    T = J @ R
    cov3 = covariance_3d(gs.scales, gs.quats)
    cov2 = T @ cov3 @ T.transpose(-1, -2)
    a = cov2[:, 0, 0] + settings.cov_reg
    b = cov2[:, 0, 1]
    c = cov2[:, 1, 1] + settings.cov_reg
    det = a * c - b * b
    conic = torch.stack([c / det, -b / det, a / det], dim=-1)
    mid = 0.5 * (a + c)
    lam = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
    r3 = 3.0 * torch.sqrt(lam)
    with torch.no_grad():
        hits = ((u + r3 >= 0) & (u - r3 <= cam.width) & (v + r3 >= 0) & (v - r3 <= cam.height))
        valid = in_front & hits & (det > 0)
    cov2d = torch.stack([torch.stack([a, b], -1), torch.stack([b, c], -1)], -2)
    return Projected(torch.stack([u, v], -1), cov2d, conic, z, r3, valid)


def project_splat(g: GaussianSet, cam: CameraModel, settings: RenderSettings = RenderSettings()):
    """Single-Gaussian view of ``project_splats``: (mean2d, cov2d, depth, valid)."""
    p = project_splats(g, cam, settings)
    return p.mean2d[0], p.cov2d[0], p.depth[0], bool(p.valid[0])


def _step_ge(x):
    """1 where x >= 0, else 0 (float arithmetic; much cheaper than boolean masks on CPU)."""
    return torch.sign(x).add_(1).clamp_(max=1)


def _step_gt(x):
    """1 where x > 0, else 0."""
    return torch.sign(x).clamp_(min=0)


def _pair_alpha(px, py, mx, my, ca, cb, cc, op, s: RenderSettings):
    """Per-(pixel, splat) opacity after falloff, clip and skip."""
    dx = px - mx
    dy = py - my
    power = -0.5 * (ca * dx * dx + cc * dy * dy) - cb * dx * dy
    g = torch.exp(torch.clamp(power, min=POWER_FLOOR))
    a_raw = op * g
    a = torch.clamp(a_raw, max=s.max_alpha)
    if s.skip_alpha > 0:
        a = a * _step_ge(a - s.skip_alpha)
    return dx, dy, power, g, a_raw, a


def _pixel_centers(y0, y1, x0, x1, dtype):
    ys = torch.arange(y0, y1, dtype=dtype) + 0.5
    xs = torch.arange(x0, x1, dtype=dtype) + 0.5
    py, px = torch.meshgrid(ys, xs, indexing="ij")
    return px.reshape(-1), py.reshape(-1)


def _sorted_valid(proj: Projected):
    tape = _ORDER_TAPE.get()
    if tape is not None and tape.replaying:
        return tape.next(proj)
    idx = torch.nonzero(proj.valid, as_tuple=False).squeeze(-1)
    order = idx[torch.sort(proj.depth.detach()[idx], stable=True).indices]
    if tape is not None:
        tape.orders.append(order)
    return order


class SortOrderTape:
    """Records the depth order of every render call, then replays it call by call.

    The composite is only piecewise smooth: two splats at nearly equal depth swap
    order under a tiny perturbation and the image jumps. Replaying the recorded
    order keeps finite differences on the piece the analytic gradient describes.

        tape = SortOrderTape()
        with tape.record(): f()
        with tape.replay(): f()   # same order, call for call
    """

    def __init__(self):
        self.orders: list[torch.Tensor] = []
        self.replaying = False
        self._pos = 0

    @contextmanager
    def _active(self, replaying: bool):
        self.replaying, self._pos = replaying, 0
        token = _ORDER_TAPE.set(self)
        try:
            yield self
        finally:
            _ORDER_TAPE.reset(token)
            if replaying and self._pos != len(self.orders):
                raise RuntimeError(f"replayed {self._pos} of {len(self.orders)} recorded renders")

    def record(self):
        self.orders = []
        return self._active(False)

    def replay(self):
        return self._active(True)

    def next(self, proj: Projected) -> torch.Tensor:
        if self._pos >= len(self.orders):
            raise RuntimeError("more render calls than were recorded")
        order = self.orders[self._pos]
        self._pos += 1
        if order.numel() and int(order.max()) >= proj.valid.shape[0]:
            raise RuntimeError("replayed order does not fit this splat set")
        return order


_ORDER_TAPE: ContextVar[SortOrderTape | None] = ContextVar("omnigs_order_tape", default=None)


def _tile_lists(mean2d, conic_cov, opacity, H, W, s: RenderSettings):
    """Per-tile index lists (ascending = depth order) of splats that can reach the tile."""
    tiles = []
    if s.skip_alpha > 0:
        ratio = opacity / s.skip_alpha
        reach = torch.sqrt(2.0 * torch.log(torch.clamp(ratio, min=1.0))) * torch.sqrt(conic_cov)
        reach = reach * (1 + 1e-6) + 1e-6
        alive = ratio > 1.0
    else:
        reach = None
    for y0 in range(0, H, s.tile):
        for x0 in range(0, W, s.tile):
            y1, x1 = min(y0 + s.tile, H), min(x0 + s.tile, W)
            if reach is None:
                ids = torch.arange(mean2d.shape[0])
            else:
                # distance from the splat center to the tile's pixel-center rectangle
                ddx = torch.clamp(torch.maximum(x0 + 0.5 - mean2d[:, 0], mean2d[:, 0] - (x1 - 0.5)), min=0.0)
                ddy = torch.clamp(torch.maximum(y0 + 0.5 - mean2d[:, 1], mean2d[:, 1] - (y1 - 0.5)), min=0.0)
                hit = alive & (ddx * ddx + ddy * ddy <= reach * reach)
                ids = torch.nonzero(hit, as_tuple=False).squeeze(-1)
            tiles.append((y0, y1, x0, x1, ids))
    return tiles


def _composite_tile_forward(px, py, m, cn, op, col, z, s: RenderSettings):
    """Chunked forward for one tile; returns (C, Dn, S, T, n_used)."""
    P = px.shape[0]
    dtype = px.dtype
    T = torch.ones(P, 1, dtype=dtype)
    C = torch.zeros(P, 3, dtype=dtype)
    Dn = torch.zeros(P, dtype=dtype)
    S = torch.zeros(P, dtype=dtype)
    N = m.shape[0]
    n_used = 0
    early = s.t_min > 0
    step = s.chunk if early else max(N, 1)
    for k0 in range(0, N, step):
        k1 = min(k0 + step, N)
        *_, a = _pair_alpha(px[:, None], py[:, None], m[None, k0:k1, 0], m[None, k0:k1, 1],
                            cn[None, k0:k1, 0], cn[None, k0:k1, 1], cn[None, k0:k1, 2],
                            op[None, k0:k1], s)
        Tc = torch.cumprod(torch.cat([T, 1 - a], dim=1), dim=1)
        # transmittance never increases, so the last column alone tells whether the stop fires
        if early and bool((Tc[:, -2] < s.t_min).any()):
            a = a * _step_ge(Tc[:, :-1] - s.t_min)
            Tc = torch.cumprod(torch.cat([T, 1 - a], dim=1), dim=1)
        w = a * Tc[:, :-1]
        cc, zc = col[k0:k1], z[k0:k1]
        if s.ordered_sums:
            C = torch.cumsum(torch.cat([C[:, None], w[:, :, None] * cc[None]], dim=1), dim=1)[:, -1]
            Dn = torch.cumsum(torch.cat([Dn[:, None], w * zc[None]], dim=1), dim=1)[:, -1]
            S = torch.cumsum(torch.cat([S[:, None], w], dim=1), dim=1)[:, -1]
        else:
            C = C + w @ cc
            Dn = Dn + w @ zc
            S = S + w.sum(dim=1)
        T = Tc[:, -1:]
        n_used = k1
        if early and bool((T < s.t_min).all()):
            break
    return C, Dn, S, T[:, 0], n_used


class _TiledComposite(torch.autograd.Function):
    @staticmethod
    def forward(ctx, mean2d, conic, opacity, color, depth, bg, H, W, settings, tiles):
        dtype = mean2d.dtype
        rgb = torch.zeros(H, W, 3, dtype=dtype)
        dmap = torch.zeros(H, W, dtype=dtype)
        amap = torch.zeros(H, W, dtype=dtype)
        used = []
        finals = []
        for (y0, y1, x0, x1, ids) in tiles:
            px, py = _pixel_centers(y0, y1, x0, x1, dtype)
            C, Dn, S, T, n_used = _composite_tile_forward(
                px, py, mean2d[ids], conic[ids], opacity[ids], color[ids], depth[ids], settings)
            used.append(n_used)
            finals.append((Dn, S, T))
            h, w = y1 - y0, x1 - x0
            rgb[y0:y1, x0:x1] = (C + T[:, None] * bg).reshape(h, w, 3)
            dmap[y0:y1, x0:x1] = (Dn / torch.clamp(S, min=DEPTH_EPS)).reshape(h, w)
            amap[y0:y1, x0:x1] = (1 - T).reshape(h, w)
        ctx.save_for_backward(mean2d, conic, opacity, color, depth, bg)
        ctx.meta = (H, W, settings, tiles, used, finals)
        return rgb, dmap, amap

    @staticmethod
    @once_differentiable
    def backward(ctx, g_rgb, g_depth, g_alpha):
        mean2d, conic, opacity, color, depth, bg = ctx.saved_tensors
        H, W, s, tiles, used, finals = ctx.meta
        dtype = mean2d.dtype
        gm = torch.zeros_like(mean2d)
        gcn = torch.zeros_like(conic)
        gop = torch.zeros_like(opacity)
        gcol = torch.zeros_like(color)
        gz = torch.zeros_like(depth)
        for (y0, y1, x0, x1, ids), n_used, (Dn, S, T_N) in zip(tiles, used, finals):
            if n_used == 0:
                continue
            ids = ids[:n_used]
            px, py = _pixel_centers(y0, y1, x0, x1, dtype)
            gC = g_rgb[y0:y1, x0:x1].reshape(-1, 3)
            gD = g_depth[y0:y1, x0:x1].reshape(-1)
            gA = g_alpha[y0:y1, x0:x1].reshape(-1)
            m, cn, op, col, z = mean2d[ids], conic[ids], opacity[ids], color[ids], depth[ids]
            dx, dy, power, g, a_raw, a = _pair_alpha(px[:, None], py[:, None], m[None, :, 0], m[None, :, 1],
                                                     cn[None, :, 0], cn[None, :, 1], cn[None, :, 2], op[None, :], s)
            P = px.shape[0]
            ones = torch.ones(P, 1, dtype=dtype)
            T_excl = torch.cumprod(torch.cat([ones, 1 - a], dim=1), dim=1)[:, :-1]
            if s.t_min > 0 and bool((T_excl[:, -1] < s.t_min).any()):
                a = a * _step_ge(T_excl - s.t_min)
                T_excl = torch.cumprod(torch.cat([ones, 1 - a], dim=1), dim=1)[:, :-1]
            w = a * T_excl
            Sd = torch.clamp(S, min=DEPTH_EPS)
            over = (S > DEPTH_EPS).to(dtype)
            gz_pix = gD / Sd                                    # dL/dDn
            gS_pix = -gD * over * Dn / (Sd * Sd)                # dL/dS
            q = gC @ col.T + gz_pix[:, None] * z[None, :] + gS_pix[:, None]
            r = gC @ bg - gA                                    # dL/dT_N
            qw = q * w
            suffix = qw.sum(dim=1, keepdim=True) - torch.cumsum(qw, dim=1)
            d_a = q * T_excl - (suffix + (r * T_N)[:, None]) / (1 - a)
            # pairs that were skipped, clipped at max_alpha or floored carry no gradient
            live = _step_gt(a) * _step_ge(s.max_alpha - a_raw) * _step_gt(power - POWER_FLOOR)
            d_araw = d_a * live
            d_power = d_araw * a_raw
            pdx = d_power * dx
            pdy = d_power * dy
            sx, sy = pdx.sum(0), pdy.sum(0)
            gop.index_add_(0, ids, (d_araw * g).sum(0))
            gm[:, 0].index_add_(0, ids, cn[:, 0] * sx + cn[:, 1] * sy)
            gm[:, 1].index_add_(0, ids, cn[:, 1] * sx + cn[:, 2] * sy)
            gcn[:, 0].index_add_(0, ids, -0.5 * (pdx * dx).sum(0))
            gcn[:, 1].index_add_(0, ids, -(pdx * dy).sum(0))
            gcn[:, 2].index_add_(0, ids, -0.5 * (pdy * dy).sum(0))
            gcol.index_add_(0, ids, w.T @ gC)
            gz.index_add_(0, ids, gz_pix @ w)
        return gm, gcn, gop, gcol, gz, None, None, None, None, None


def _prepare(gs: GaussianSet, cam: CameraModel, s: RenderSettings):
    proj = project_splats(gs, cam, s)
    order = _sorted_valid(proj)
    lam_max = (proj.radius3[order] / 3.0) ** 2
    return proj, order, lam_max


def _bg_tensor(background, dtype):
    return torch.as_tensor(background if background is not None else (0.0, 0.0, 0.0), dtype=dtype).reshape(3)


def render(gs: GaussianSet, cam: CameraModel, background=(0.0, 0.0, 0.0),
           settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Tiled differentiable render of RGB, expected depth and accumulated alpha."""
    dtype = gs.means.dtype
    bg = _bg_tensor(background, dtype)
    H, W = cam.height, cam.width
    if len(gs) == 0:
        return RenderOutput(bg.expand(H, W, 3).clone(), torch.zeros(H, W, dtype=dtype),
                            torch.zeros(H, W, dtype=dtype))
    proj, order, lam_max = _prepare(gs, cam, settings)
    m = proj.mean2d[order]
    cn = proj.conic[order]
    op = gs.opacities[order]
    col = gs.colors[order]
    z = proj.depth[order]
    with torch.no_grad():
        tiles = _tile_lists(m.detach(), lam_max.detach(), op.detach(), H, W, settings)
    rgb, dmap, amap = _TiledComposite.apply(m, cn, op, col, z, bg, H, W, settings, tiles)
    return RenderOutput(rgb, dmap, amap)


def brute_force_render(gs: GaussianSet, cam: CameraModel, background=(0.0, 0.0, 0.0),
                       settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Reference compositor: all valid splats, all pixels, sequential, no early stop."""
    dtype = gs.means.dtype
    bg = _bg_tensor(background, dtype)
    H, W = cam.height, cam.width
    px, py = _pixel_centers(0, H, 0, W, dtype)
    P = px.shape[0]
    T = torch.ones(P, dtype=dtype)
    C = torch.zeros(P, 3, dtype=dtype)
    Dn = torch.zeros(P, dtype=dtype)
    S = torch.zeros(P, dtype=dtype)
    if len(gs) > 0:
        proj, order, _ = _prepare(gs, cam, settings)
        for i in order.tolist():
            mx, my = proj.mean2d[i, 0:1], proj.mean2d[i, 1:2]
            cn = proj.conic[i]
            *_, a = _pair_alpha(px, py, mx, my, cn[0:1], cn[1:2], cn[2:3],
                                        gs.opacities[i:i + 1], settings)
            w = a * T
            C = C + w[:, None] * gs.colors[i][None, :]
            Dn = Dn + w * proj.depth[i:i + 1]
            S = S + w
            T = T * (1 - a)
    rgb = (C + T[:, None] * bg).reshape(H, W, 3)
    depth = (Dn / torch.clamp(S, min=DEPTH_EPS)).reshape(H, W)
    alpha = (1 - T).reshape(H, W)
    return RenderOutput(rgb, depth, alpha)
