"""Per-view image features, the multi-view U-Net and the pixel-aligned Gaussian head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffcore import ops
from .diffcore.layers import Conv2d, LayerNorm, Linear
from .geometry import CameraModel, camera_rays_plucker, camera_tensors
from .splat.gaussians import SOURCE_PIXEL, GaussianSet

PIXEL_DIM = 15  # depth residual 1, offset 3, opacity 1, scale 3, quaternion 4, color 3
DEPTH_RESIDUAL_BOUND = 2.0
OFFSET_FRACTION = 0.05
NEAR_DEPTH = 0.5
PIXEL_OPACITY_BIAS = 0.0


@dataclass
class FeatureMapSet:
    maps: torch.Tensor  # (K, Hf, Wf, C) channel-last
    factor: int

    def __post_init__(self):
        if self.factor < 1:
            raise ValueError("downsample factor must be >= 1")

    @property
    def shape(self):
        return tuple(self.maps.shape)

    def nchw(self):
        return self.maps.permute(0, 3, 1, 2)

    @classmethod
    def from_nchw(cls, x, factor):
        return cls(x.permute(0, 2, 3, 1), factor)


def downscaled_camera(cam: CameraModel, factor: int) -> CameraModel:
    """Camera whose pixel grid is the ``factor``-times coarser feature grid."""
    return CameraModel(cam.fx / factor, cam.fy / factor, cam.cx / factor, cam.cy / factor,
                       cam.width // factor, cam.height // factor, cam.rotation, cam.translation)


def plucker_maps(cams, factor: int, dtype=torch.float64) -> torch.Tensor:
    """(K, Hf, Wf, 6) Plücker embeddings at feature resolution."""
    return torch.stack([torch.as_tensor(camera_rays_plucker(downscaled_camera(c, factor)), dtype=dtype)
                        for c in cams])


class ImageEncoder(nn.Module):
    """Three-stage convolutional encoder; strides (2, 2, 1) give a 4x downsample."""

    factor = 4

    def __init__(self, c_out: int = 32, c_mid: int = 16):
        super().__init__()
        self.c1 = Conv2d(3, c_mid, 3, stride=2)
        self.c2 = Conv2d(c_mid, c_out, 3, stride=2)
        self.c3 = Conv2d(c_out, c_out, 3)

    def forward(self, x):
        return self.c3(ops.silu(self.c2(ops.silu(self.c1(x)))))


def encode_images(images: torch.Tensor, encoder: ImageEncoder) -> FeatureMapSet:
    """(K, H, W, 3) images -> per-view feature maps at 1/factor resolution."""
    if images.dim() != 4 or images.shape[-1] != 3:
        raise ValueError(f"expected (K, H, W, 3) images, got {tuple(images.shape)}")
    K, H, W, _ = images.shape
    f = encoder.factor
    if H % f or W % f:
        raise ValueError(f"image size {H}x{W} is not divisible by {f}")
    out = encoder(images.permute(0, 3, 1, 2))
    return FeatureMapSet.from_nchw(out, f)


def _fold(x, p):
    """(K, C, H, W) -> (K, N, p*p*C) patch tokens."""
    K, C, H, W = x.shape
    t = x.reshape(K, C, H // p, p, W // p, p).permute(0, 2, 4, 3, 5, 1)
    return t.reshape(K, (H // p) * (W // p), p * p * C)


def _unfold(t, p, C, H, W):
    K = t.shape[0]
    x = t.reshape(K, H // p, W // p, p, p, C).permute(0, 5, 1, 3, 2, 4)
    return x.reshape(K, C, H, W)


class PatchCrossAttention(nn.Module):
    """Tokens of one view attend to the tokens of all views."""

    def __init__(self, c: int, patch: int, d_attn: int = 64, n_heads: int = 4):
        super().__init__()
        d_tok = c * patch * patch
        self.patch, self.n_heads = patch, n_heads
        self.norm = LayerNorm(d_tok)
        self.q = Linear(d_tok, d_attn)
        self.k = Linear(d_tok, d_attn)
        self.v = Linear(d_tok, d_attn)
        self.out = Linear(d_attn, d_tok)

    def tokens_attend(self, tok):
        """(K, N, D) -> residual update of the same shape."""
        K, N, _ = tok.shape
        h = self.norm(tok)
        split = lambda t: t.reshape(K * N, self.n_heads, -1).transpose(0, 1)  # (heads, K*N, d)
        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        att = ops.softmax(q @ k.transpose(1, 2) / np.sqrt(q.shape[-1]), dim=-1)
        o = (att @ v).transpose(0, 1).reshape(K, N, -1)
        return self.out(o)

    def forward(self, x):
        K, C, H, W = x.shape
        p = self.patch
        if H % p or W % p:
            raise ValueError(f"feature size {H}x{W} is not divisible by patch {p}")
        tok = _fold(x, p)
        return x + _unfold(self.tokens_attend(tok), p, C, H, W)


def patchified_cross_attention(feats: FeatureMapSet, block: PatchCrossAttention) -> FeatureMapSet:
    return FeatureMapSet.from_nchw(block(feats.nchw()), feats.factor)


class ConvBlock(nn.Module):
    def __init__(self, c_in, c_out):
        super().__init__()
        self.a = Conv2d(c_in, c_out, 3)
        self.b = Conv2d(c_out, c_out, 3)

    def forward(self, x):
        return ops.silu(self.b(ops.silu(self.a(x))))


class MultiViewUNet(nn.Module):
    """Per-view U-Net with cross-view patch attention at every resolution."""

    def __init__(self, c_in: int, widths=(32, 64, 128), patches_down=(4, 2, 1), patches_up=(1, 2, 4),
                 c_out: int | None = None, d_attn: int = 64, n_heads: int = 4):
        super().__init__()
        w = list(widths)
        self.down = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        prev = c_in + 6
        for width, p in zip(w, patches_down):
            self.down.append(ConvBlock(prev, width))
            self.down_attn.append(PatchCrossAttention(width, p, d_attn, n_heads))
            prev = width
        self.up = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        # patches_up[0] belongs to the bottleneck, whose attention is the last down block
        for lvl, p in zip(range(len(w) - 2, -1, -1), patches_up[1:]):
            self.up.append(ConvBlock(prev + w[lvl], w[lvl]))
            self.up_attn.append(PatchCrossAttention(w[lvl], p, d_attn, n_heads))
            prev = w[lvl]
        self.head = Conv2d(prev, c_out or c_in, 3)

    def attention_blocks(self):
        return list(self.down_attn) + list(self.up_attn)

    def forward(self, x, plucker):
        h = ops.concat([x, plucker], dim=1)
        skips = []
        for i, (blk, att) in enumerate(zip(self.down, self.down_attn)):
            if i > 0:
                h = ops.avg_pool2d(h, 2)
            h = att(blk(h))
            skips.append(h)
        for blk, att, skip in zip(self.up, self.up_attn, reversed(skips[:-1])):
            h = ops.upsample_nearest(h, 2)
            h = att(blk(ops.concat([h, skip], dim=1)))
        return self.head(h)


def mv_unet(feats: FeatureMapSet, plucker: torch.Tensor, net: MultiViewUNet) -> FeatureMapSet:
    """``plucker`` is (K, Hf, Wf, 6) at feature resolution."""
    if tuple(plucker.shape[:3]) != tuple(feats.maps.shape[:3]):
        raise ValueError("Plücker maps must match the feature resolution")
    out = net(feats.nchw(), plucker.permute(0, 3, 1, 2).to(feats.maps.dtype))
    return FeatureMapSet.from_nchw(out, feats.factor)


class PixelGaussianHead(nn.Module):
    """Upsampled features + RGB -> per-pixel raw Gaussian parameters (three convs)."""

    def __init__(self, c_feat: int, hidden: int = 16):
        super().__init__()
        self.c1 = Conv2d(c_feat + 3, hidden, 3)
        self.c2 = Conv2d(hidden, hidden, 3)
        self.c3 = Conv2d(hidden, PIXEL_DIM, 1)

    def forward(self, x):
        return self.c3(ops.silu(self.c2(ops.silu(self.c1(x)))))

    def zero_(self):
        for c in (self.c1, self.c2, self.c3):
            c.zero_()
        return self


@dataclass
class PixelGaussianOutput:
    gaussians: GaussianSet  # K*H*W Gaussians, view-major raster order
    depth: torch.Tensor     # (K, H, W) along-ray depth d_p
    offset: torch.Tensor    # (K, H, W, 3)


def soft_clamp(x, bound: float):
    return bound * ops.tanh(x / bound)


def _logit(p, eps=1e-2):
    p = p.clamp(eps, 1 - eps)
    return torch.log(p) - torch.log1p(-p)


def decode_pixel_gaussians(feats: FeatureMapSet, cams, init_depth, head: PixelGaussianHead,
                           images: torch.Tensor, use_depth_init: bool = True,
                           scale_init: float = 0.75, opacity_bias: float = PIXEL_OPACITY_BIAS) -> PixelGaussianOutput:
    """One Gaussian per input pixel, placed at ``o + d r + delta``.

    ``init_depth`` is a (K, H, W) along-ray depth map (ignored when
    ``use_depth_init`` is false). Colors are a residual on the input pixel's
    color in logit space; the head also sees the RGB directly.
    """
    K, H, W, _ = images.shape
    dtype = feats.maps.dtype
    up = ops.upsample_bilinear(feats.nchw(), (H, W))
    raw = head(ops.concat([up, images.permute(0, 3, 1, 2).to(dtype)], dim=1))
    raw = raw.permute(0, 2, 3, 1)  # (K, H, W, 15)
    if use_depth_init:
        base = torch.as_tensor(init_depth, dtype=dtype)
        if tuple(base.shape) != (K, H, W):
            raise ValueError(f"depth init has shape {tuple(base.shape)}, expected {(K, H, W)}")
        d = base * ops.exp(soft_clamp(raw[..., 0], DEPTH_RESIDUAL_BOUND))
    else:
        d = NEAR_DEPTH * ops.exp(3.0 * ops.softplus(raw[..., 0]))
    delta = ops.tanh(raw[..., 1:4]) * (OFFSET_FRACTION * d[..., None])
    rays = [camera_tensors(c, dtype) for c in cams]
    o = torch.stack([r["origins"] for r in rays]).reshape(K, H, W, 3)
    r = torch.stack([r["dirs"] for r in rays]).reshape(K, H, W, 3)
    means = o + d[..., None] * r + delta
    f = torch.as_tensor([c.fx for c in cams], dtype=dtype)[:, None, None, None]
    s0 = float(np.log(np.expm1(scale_init)))
    scales = (d[..., None] / f) * ops.softplus(raw[..., 5:8] + s0)
    q = raw[..., 8:12] + torch.tensor([1.0, 0.0, 0.0, 0.0], dtype=dtype)
    q = q / q.norm(dim=-1, keepdim=True)
    colors = ops.sigmoid(raw[..., 12:15] + _logit(images.to(dtype)))
    opac = ops.sigmoid(raw[..., 4] + opacity_bias)
    n = K * H * W
    gs = GaussianSet(means.reshape(n, 3), opac.reshape(n), scales.reshape(n, 3), q.reshape(n, 4),
                     colors.reshape(n, 3), torch.full((n,), SOURCE_PIXEL, dtype=torch.long),
                     features=up.permute(0, 2, 3, 1).reshape(n, -1))
    return PixelGaussianOutput(gs, d, delta)


def depth_init_oracle(gt_depth, sigma: float, seed: int) -> np.ndarray:
    """Noisy stand-in for a monocular depth estimate: ``gt * exp(sigma * n)``."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    gt = np.asarray(gt_depth, dtype=np.float64)
    if sigma == 0:
        return gt.copy()
    n = np.random.default_rng(seed).standard_normal(gt.shape)
    return gt * np.exp(sigma * n)
