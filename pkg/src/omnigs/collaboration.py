"""Volume-pixel collaboration: feature fusion into the triplane and the decomposed loss."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .diffcore import ops
from .diffcore.layers import Linear
from .diffcore.ops import scatter_mean
from .geometry import pixel_grid, ray_directions, ray_length_per_z, world_in_volume, world_to_plane_uv
from .splat.gaussians import GaussianSet
from .splat.render import RenderSettings, render
from .volume import PLANES, Triplane

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    full_lpips: float = 0.05   # lambda_1
    volume: float = 1.0        # lambda_2
    volume_lpips: float = 0.05  # lambda_V1
    volume_depth: float = 0.01  # lambda_V2

    def __post_init__(self):
        if min(self.full_lpips, self.volume, self.volume_lpips, self.volume_depth) < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class VolumeMaskSet:
    masks: torch.Tensor   # (K, H, W) in {0, 1}
    depths: torch.Tensor  # (K, H, W) camera-z depth of the pixel Gaussians
    alpha: torch.Tensor   # (K, H, W)

    @property
    def fractions(self) -> list[float]:
        return [float(m.mean()) for m in self.masks]

    def select(self, idx) -> "VolumeMaskSet":
        idx = list(idx)
        return VolumeMaskSet(self.masks[idx], self.depths[idx], self.alpha[idx])


@dataclass
class LossReport:
    full_mse: torch.Tensor
    full_lpips: torch.Tensor
    volume_mse: torch.Tensor
    volume_lpips: torch.Tensor
    volume_depth: torch.Tensor
    volume_total: torch.Tensor
    total: torch.Tensor
    weights: LossWeights
    mask_fraction: list[float] = field(default_factory=list)

    def values(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in
                ("full_mse", "full_lpips", "volume_mse", "volume_lpips", "volume_depth", "volume_total", "total")}

    def recomposition_error(self) -> float:
        """Largest deviation of the stored totals from recomposing the stored components."""
        v = self.values()
        w = self.weights
        lv = v["volume_mse"] + w.volume_lpips * v["volume_lpips"] + w.volume_depth * v["volume_depth"]
        lt = v["full_mse"] + w.full_lpips * v["full_lpips"] + w.volume * v["volume_total"]
        return max(abs(lv - v["volume_total"]), abs(lt - v["total"]))


class PlaneFusion(nn.Module):
    """One linear map per plane from pooled pixel features to query channels."""

    def __init__(self, c_pix: int, c: int):
        super().__init__()
        self.proj = nn.ModuleDict({n: Linear(c_pix, c) for n in PLANES})

    def forward(self, name, x):
        return self.proj[name](x)


def _cells(uv, rows, cols):
    idx = np.floor(uv + 0.5).astype(np.int64)
    r = np.clip(idx[:, 0], 0, rows - 1)
    c = np.clip(idx[:, 1], 0, cols - 1)
    return r * cols + c


def fusion_cells(gp: GaussianSet, spec) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """In-volume Gaussian indices and their nearest cell on each plane (flat index)."""
    mu = gp.means.detach().cpu().numpy()
    inside = np.nonzero(world_in_volume(spec, mu))[0]
    uv = world_to_plane_uv(spec, mu[inside])
    return inside, {n: _cells(uv[n], *spec.plane_shape(n)) for n in PLANES}


def fuse_pixel_to_triplane(gp: GaussianSet, planes: Triplane, fusion: PlaneFusion, cells=None) -> Triplane:
    """Average-pool in-volume pixel-Gaussian features per plane cell, transform, add.

    Cells with no Gaussians are left untouched; with no in-volume Gaussians the
    input triplane is returned as is. ``cells`` may carry a precomputed
    :func:`fusion_cells` result so the binning stays fixed.
    """
    if gp.features is None:
        raise ValueError("pixel Gaussians carry no features to fuse")
    spec = planes.spec
    inside, cell_map = fusion_cells(gp, spec) if cells is None else cells
    if inside.size == 0:
        return planes
    feats = gp.features[torch.as_tensor(inside)]
    out = {}
    for name in PLANES:
        rows, cols = spec.plane_shape(name)
        mean, count = scatter_mean(feats, torch.as_tensor(cell_map[name]), rows * cols)
        hit = (count > 0)[:, None]
        inc = fusion(name, mean)
        inc = torch.where(hit, inc, torch.zeros_like(inc))
        out[name] = planes[name] + inc.reshape(rows, cols, -1)
    return planes.replace(**out)


@torch.no_grad()
def compute_volume_masks(gp: GaussianSet, cams, spec, settings: RenderSettings = RenderSettings()) -> VolumeMaskSet:
    """Render pixel-Gaussian depth per input view and flag pixels whose surface lies in the volume."""
    g = gp.detach()
    masks, depths, alphas = [], [], []
    for cam in cams:
        out = render(g.without_features(), cam, settings=settings)
        z = out.depth.double().numpy()
        d = z * ray_length_per_z(cam)
        u, v = pixel_grid(cam)
        p = cam.center + d[..., None] * ray_directions(cam, u, v)
        m = world_in_volume(spec, p) & (out.alpha.numpy() > 0)
        masks.append(torch.as_tensor(m, dtype=gp.dtype))
        depths.append(out.depth)
        alphas.append(out.alpha)
    return VolumeMaskSet(torch.stack(masks), torch.stack(depths), torch.stack(alphas))


def masked_photometric_loss(rendered, target, mask) -> torch.Tensor:
    """Squared error averaged over masked pixels and channels.

    ``rendered``/``target`` are (..., H, W, C) and ``mask`` is (..., H, W).
    """
    if rendered.shape != target.shape:
        raise ValueError("shape mismatch")
    m = mask.to(rendered.dtype)
    count = m.sum()
    if float(count) == 0:
        log.debug("masked photometric loss: empty mask")
        return rendered.new_zeros(())
    d = rendered - target
    e = d * d
    return (e * m[..., None]).sum() / (count * rendered.shape[-1])


def depth_alignment_loss(dv, dp, mask) -> torch.Tensor:
    """Masked mean |dv - dp| with ``dp`` (pixel-branch depth) held constant."""
    m = mask.to(dv.dtype)
    count = m.sum()
    if float(count) == 0:
        log.debug("depth alignment loss: empty mask")
        return dv.new_zeros(())
    return ((dv - dp.detach()).abs() * m).sum() / count


def compose_loss(full_mse, full_lpips, volume_mse, volume_lpips, volume_depth,
                 weights: LossWeights = LossWeights(), mask_fraction=None) -> LossReport:
    # composed in float64 whatever the training precision
    as_t = lambda x: x.double() if isinstance(x, torch.Tensor) else torch.tensor(float(x), dtype=torch.float64)
    full_mse, full_lpips, volume_mse, volume_lpips, volume_depth = map(
        as_t, (full_mse, full_lpips, volume_mse, volume_lpips, volume_depth))
    lv = volume_mse + weights.volume_lpips * volume_lpips + weights.volume_depth * volume_depth
    lt = full_mse + weights.full_lpips * full_lpips + weights.volume * lv
    return LossReport(full_mse, full_lpips, volume_mse, volume_lpips, volume_depth, lv, lt, weights,
                      list(mask_fraction or []))


def _lpips_or_zero(hook, a, b, like):
    if hook is None:
        return like.new_zeros(())
    v = hook(a, b)
    return like.new_zeros(()) if v is None else v


def total_loss(novel_rgb, novel_target, volume_rgb=None, input_target=None, volume_depth=None,
               masks: VolumeMaskSet | None = None, weights: LossWeights = LossWeights(),
               lpips=None) -> LossReport:
    """Full-set loss on novel views plus the masked volume-branch loss on input views.

    Pass ``volume_rgb=None`` to drop the volume terms (they are then exactly 0).
    """
    if novel_rgb.shape[0] < 1:
        raise ValueError("need at least one novel view")
    full_mse = ops.mse_loss(novel_rgb, novel_target)
    full_lp = _lpips_or_zero(lpips, novel_rgb, novel_target, full_mse)
    zero = full_mse.new_zeros(())
    if volume_rgb is None:
        return compose_loss(full_mse, full_lp, zero, zero, zero, weights)
    m = masks.masks
    v_mse = masked_photometric_loss(volume_rgb, input_target, m)
    v_lp = zero
    if lpips is not None:
        mm = m[..., None]
        v_lp = _lpips_or_zero(lpips, volume_rgb * mm, input_target * mm, full_mse)
    v_dpt = depth_alignment_loss(volume_depth, masks.depths, m)
    return compose_loss(full_mse, full_lp, v_mse, v_lp, v_dpt, weights, masks.fractions)
