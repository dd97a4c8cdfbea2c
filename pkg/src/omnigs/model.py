"""End-to-end model: both Gaussian branches, their collaboration, and the per-step loss."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .collaboration import (LossReport, LossWeights, PlaneFusion, VolumeMaskSet, compute_volume_masks,
                            fuse_pixel_to_triplane, fusion_cells, total_loss)
from .data import BinSample
from .diffcore.layers import init_specs
from .geometry import VolumeSpec, ray_length_per_z
from .pixel import (ImageEncoder, MultiViewUNet, PixelGaussianHead, PixelGaussianOutput,
                    decode_pixel_gaussians, depth_init_oracle, encode_images, mv_unet, plucker_maps)
from .splat.gaussians import GaussianSet, merge_gaussians
from .splat.render import RenderSettings, render
from .volume import (DeformAttnConfig, Triplane, TriplaneEncoder, VoxelGaussianHead, build_view_references,
                     decode_voxel_gaussians)

MODES = ("full", "pixel", "volume")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 64
    feat_channels: int = 32
    encoder_mid: int = 16
    unet_widths: tuple[int, ...] = (32, 64, 128)
    unet_patches_down: tuple[int, ...] = (4, 2, 1)
    unet_patches_up: tuple[int, ...] = (1, 2, 4)
    unet_attn_dim: int = 64
    unet_heads: int = 4
    n_heads: int = 8
    n_points_2d: tuple[int, ...] = (4, 8, 8)
    n_points_3d: tuple[int, ...] = (4, 4, 4)
    n_pillar: int = 4
    offset_scale: float = 4.0
    layer_kinds: tuple[str, ...] = ("cida+cpda", "cida+cpda", "cpda")
    gaussians_per_voxel: int = 3
    voxel_hidden: int = 64
    pixel_hidden: int = 16
    mode: str = "full"
    depth_init: bool = True
    fusion: bool = True
    decomposition: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")

    @property
    def uses_pixel(self) -> bool:
        return self.mode in ("full", "pixel")

    @property
    def uses_volume(self) -> bool:
        return self.mode in ("full", "volume")

    def attn(self) -> DeformAttnConfig:
        return DeformAttnConfig(self.n_heads, tuple(self.n_points_2d), tuple(self.n_points_3d),
                                self.n_pillar, self.offset_scale)


@dataclass
class ModelOutput:
    gaussians: GaussianSet                 # G, features dropped
    volume: GaussianSet | None             # G_V
    pixel: PixelGaussianOutput | None      # G_P with per-Gaussian features
    planes: Triplane | None


@dataclass
class FrozenAux:
    """Piecewise-constant decisions held fixed, e.g. during finite-difference checks."""

    masks: VolumeMaskSet | None = None
    cells: tuple | None = None


class OmniGaussian(nn.Module):
    def __init__(self, cfg: ModelConfig, spec: VolumeSpec):
        super().__init__()
        self.cfg, self.spec = cfg, spec
        self.encoder = ImageEncoder(cfg.feat_channels, cfg.encoder_mid)
        if cfg.uses_pixel:
            self.unet = MultiViewUNet(cfg.feat_channels, cfg.unet_widths, cfg.unet_patches_down,
                                      cfg.unet_patches_up, cfg.feat_channels, cfg.unet_attn_dim, cfg.unet_heads)
            self.pixel_head = PixelGaussianHead(cfg.feat_channels, cfg.pixel_hidden)
        if cfg.uses_volume:
            self.triplane = TriplaneEncoder(spec, cfg.channels, cfg.feat_channels, cfg.attn(), cfg.layer_kinds)
            self.voxel_head = VoxelGaussianHead(cfg.channels, cfg.voxel_hidden, cfg.gaussians_per_voxel)
        if cfg.mode == "full" and cfg.fusion:
            self.fusion = PlaneFusion(cfg.feat_channels, cfg.channels)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    @property
    def init_specs(self) -> dict[str, str]:
        specs = init_specs(self)
        for n in ("hw", "zh", "wz"):
            key = f"triplane.queries.{n}"
            if key in specs:
                specs[key] = "normal(0, 0.02)"
        return specs

    def forward(self, images, cams, init_depth=None, frozen: FrozenAux | None = None) -> ModelOutput:
        images = images.to(self.dtype)
        feats = encode_images(images, self.encoder)
        pix = None
        if self.cfg.uses_pixel:
            pl = plucker_maps(cams, feats.factor, self.dtype)
            fhat = mv_unet(feats, pl, self.unet)
            pix = decode_pixel_gaussians(fhat, cams, init_depth, self.pixel_head, images,
                                         use_depth_init=self.cfg.depth_init)
        gv = planes = None
        if self.cfg.uses_volume:
            planes = self.triplane.initial_planes()
            if pix is not None and self.cfg.fusion:
                cells = frozen.cells if frozen is not None and frozen.cells is not None else None
                planes = fuse_pixel_to_triplane(pix.gaussians, planes, self.fusion, cells)
            refs = build_view_references(self.spec, cams, self.triplane.cfg, feats.factor)
            planes = self.triplane(feats.maps, refs, planes)
            gv = decode_voxel_gaussians(planes, self.voxel_head)
        gp = pix.gaussians.without_features() if pix is not None else None
        g = merge_gaussians(gv, gp) if gv is not None and gp is not None else (gv if gv is not None else gp)
        return ModelOutput(g, gv, pix, planes)


def along_ray_depth(cams, z_depth) -> np.ndarray:
    """Camera-z depth maps (K, H, W) -> along-ray distance, with misses set far."""
    d = np.stack([np.asarray(z, dtype=np.float64) * ray_length_per_z(c) for c, z in zip(cams, z_depth)])
    finite = np.isfinite(d) & (d > 0)
    far = 2.0 * float(d[finite].max()) if finite.any() else 100.0
    return np.where(finite, d, far)


def depth_init_for(sample: BinSample, sigma: float, seed: int) -> np.ndarray:
    return depth_init_oracle(along_ray_depth(sample.input_cams, sample.input_depth), sigma, seed)


@dataclass
class StepResult:
    report: LossReport
    output: ModelOutput
    masks: VolumeMaskSet | None
    novel_rgb: torch.Tensor
    volume_rgb: torch.Tensor | None = None
    extra: dict = field(default_factory=dict)


def freeze_aux(model: OmniGaussian, sample: BinSample, init_depth, settings: RenderSettings) -> FrozenAux:
    """Evaluate the model once and capture the data-dependent discrete decisions."""
    with torch.no_grad():
        out = model(sample.input_images, sample.input_cams, init_depth)
    masks = cells = None
    if out.pixel is not None:
        if model.cfg.uses_volume and model.cfg.fusion:
            cells = fusion_cells(out.pixel.gaussians, model.spec)
        if model.cfg.mode == "full" and model.cfg.decomposition:
            masks = compute_volume_masks(out.pixel.gaussians, sample.input_cams, model.spec, settings)
    return FrozenAux(masks, cells)


def step_loss(model: OmniGaussian, sample: BinSample, init_depth, novel_idx=None, input_idx=None,
              weights: LossWeights = LossWeights(), settings: RenderSettings = RenderSettings(),
              frozen: FrozenAux | None = None, lpips=None, background=(0.0, 0.0, 0.0)) -> StepResult:
    """Forward both branches, build masks, render and compose the training objective.

    ``novel_idx`` / ``input_idx`` pick the novel views supervising G and the input
    views supervising G_V (all of them when None).
    """
    dtype = model.dtype
    out = model(sample.input_images, sample.input_cams, init_depth, frozen)
    novel_idx = list(range(sample.n_novel)) if novel_idx is None else list(novel_idx)
    novel = torch.stack([render(out.gaussians, sample.novel_cams[i], background, settings).rgb for i in novel_idx])
    target = sample.novel_images[novel_idx].to(dtype)
    decompose = model.cfg.mode == "full" and model.cfg.decomposition
    if not decompose:
        rep = total_loss(novel, target, weights=weights, lpips=lpips)
        return StepResult(rep, out, None, novel)
    input_idx = list(range(sample.n_input)) if input_idx is None else list(input_idx)
    cams = [sample.input_cams[i] for i in input_idx]
    if frozen is not None and frozen.masks is not None:
        masks = frozen.masks.select(input_idx)
    else:
        masks = compute_volume_masks(out.pixel.gaussians, cams, model.spec, settings)
    vr = [render(out.volume, c, background, settings) for c in cams]
    v_rgb = torch.stack([r.rgb for r in vr])
    v_depth = torch.stack([r.depth for r in vr])
    rep = total_loss(novel, target, v_rgb, sample.input_images[input_idx].to(dtype), v_depth, masks, weights, lpips)
    return StepResult(rep, out, masks, novel, v_rgb)
