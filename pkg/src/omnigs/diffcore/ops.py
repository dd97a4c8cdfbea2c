"""Differentiable op catalog.

Arrays are ``torch.Tensor`` (float64 unless the caller picks float32) and the
reverse pass comes from torch autograd. Two ops carry hand-written backward
passes because the rest of the pipeline leans on their exact semantics:
``bilinear_sample_2d`` and ``scatter_mean``.

Image-like arrays use NCHW for the convolution family and channel-last
(H, W, C) for sampling grids.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch.autograd.function import once_differentiable

DEFAULT_DTYPE = torch.float64


# ---------------------------------------------------------------------------
# thin wrappers (forward and backward provided by torch)
# ---------------------------------------------------------------------------

def linear(x, weight, bias=None):
    return F.linear(x, weight, bias)


def matmul(a, b):
    return a @ b


def conv2d(x, weight, bias=None, stride: int = 1, padding: str | int = "same"):
    if padding == "same":
        k = weight.shape[-1]
        if stride == 1:
            return F.conv2d(x, weight, bias, stride=1, padding="same")
        padding = k // 2
    elif padding == "valid":
        padding = 0
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def avg_pool2d(x, factor: int = 2):
    return F.avg_pool2d(x, factor)


def upsample_nearest(x, factor: int = 2):
    return F.interpolate(x, scale_factor=factor, mode="nearest")


def upsample_bilinear(x, size):
    return F.interpolate(x, size=size, mode="bilinear", align_corners=False)


def add(a, b):
    return a + b


def sub(a, b):
    return a - b


def mul(a, b):
    return a * b


sigmoid = torch.sigmoid
tanh = torch.tanh
exp = torch.exp


def softplus(x):
    return F.softplus(x)


def silu(x):
    return x * torch.sigmoid(x)


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5):
    return F.layer_norm(x, x.shape[-1:], weight, bias, eps)


def softmax(x, dim: int = -1):
    return torch.softmax(x, dim=dim)


def concat(xs, dim: int = -1):
    return torch.cat(list(xs), dim=dim)


def mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim=dim)


def sum(x, dim=None):  # noqa: A001 - catalog name
    return x.sum() if dim is None else x.sum(dim=dim)


def mse_loss(a, b):
    """Mean squared error as ``sum / count`` (masked variants use the same form)."""
    d = a - b
    return (d * d).sum() / d.numel()


def l1_loss(a, b):
    return (a - b).abs().sum() / a.numel()


# ---------------------------------------------------------------------------
# bilinear sampling
# ---------------------------------------------------------------------------

def _corners(coords: torch.Tensor, H: int, W: int):
    r, c = coords[:, 0], coords[:, 1]
    r0f, c0f = torch.floor(r), torch.floor(c)
    fr, fc = r - r0f, c - c0f
    r0, c0 = r0f.long(), c0f.long()
    out = []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        ri, ci = r0 + dr, c0 + dc
        wr = fr if dr else 1 - fr
        wc = fc if dc else 1 - fc
        valid = (ri >= 0) & (ri < H) & (ci >= 0) & (ci < W)
        # d(weight)/d(row), d(weight)/d(col)
        dwr = (1.0 if dr else -1.0) * wc
        dwc = (1.0 if dc else -1.0) * wr
        out.append((ri.clamp(0, H - 1), ci.clamp(0, W - 1), wr * wc, dwr, dwc, valid))
    return out


class _BilinearSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, grid, coords, batch):
        B, H, W, C = grid.shape
        flat = grid.reshape(B * H * W, C)
        base = batch * (H * W)
        out = grid.new_zeros(coords.shape[0], C)
        saved = []
        for ri, ci, w, dwr, dwc, valid in _corners(coords, H, W):
            idx = base + ri * W + ci
            wv = torch.where(valid, w, torch.zeros_like(w))
            out += wv[:, None] * flat[idx]
            saved.append((idx, wv, dwr, dwc, valid))
        ctx.saved = saved
        ctx.grid_shape = grid.shape
        ctx.save_for_backward(grid)
        return out

    @staticmethod
    @once_differentiable
    def backward(ctx, g):
        (grid,) = ctx.saved_tensors
        B, H, W, C = ctx.grid_shape
        flat = grid.reshape(B * H * W, C)
        g_grid = g_coords = None
        if ctx.needs_input_grad[0]:
            acc = torch.zeros_like(flat)
            for idx, wv, _, _, _ in ctx.saved:
                acc.index_add_(0, idx, wv[:, None] * g)
            g_grid = acc.reshape(B, H, W, C)
        if ctx.needs_input_grad[1]:
            gr = g.new_zeros(g.shape[0])
            gc = g.new_zeros(g.shape[0])
            for idx, _, dwr, dwc, valid in ctx.saved:
                val = (flat[idx] * g).sum(-1)
                val = torch.where(valid, val, torch.zeros_like(val))
                gr = gr + dwr * val
                gc = gc + dwc * val
            g_coords = torch.stack([gr, gc], dim=-1)
        return g_grid, g_coords, None


def bilinear_sample_2d(grid: torch.Tensor, coords: torch.Tensor, batch: torch.Tensor | None = None):
    """Sample an (H, W, C) or (B, H, W, C) grid at continuous (row, col) coords.

    Node ``(i, j)`` sits at coordinate ``(i, j)``. Neighbor nodes outside the
    grid read as zero, so the sampled value fades to zero over the half cell
    past the border and is exactly zero beyond ``[-1, dims]``.
    """
    if grid.dim() == 3:
        grid = grid.unsqueeze(0)
    if batch is None:
        batch = torch.zeros(coords.shape[0], dtype=torch.long, device=coords.device)
    return _BilinearSample.apply(grid, coords, batch.long())


# ---------------------------------------------------------------------------
# scatter mean
# ---------------------------------------------------------------------------

class _ScatterMean(torch.autograd.Function):
    @staticmethod
    def forward(ctx, values, index, size):
        counts = torch.zeros(size, dtype=values.dtype)
        counts.index_add_(0, index, torch.ones_like(index, dtype=values.dtype))
        sums = values.new_zeros(size, values.shape[1])
        sums.index_add_(0, index, values)
        denom = counts.clamp(min=1.0)
        ctx.save_for_backward(index, denom)
        ctx.mark_non_differentiable(counts)
        return sums / denom[:, None], counts

    @staticmethod
    @once_differentiable
    def backward(ctx, g, _g_counts):
        index, denom = ctx.saved_tensors
        return (g / denom[:, None])[index], None, None


def scatter_mean(values: torch.Tensor, index: torch.Tensor, size: int):
    """Per-bin mean of ``values`` rows; returns ``(means, counts)``. Empty bins are 0."""
    return _ScatterMean.apply(values, index.long(), int(size))
