"""Image and depth metrics: PSNR, SSIM, PCC, plus a perceptual-distance hook."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03

# (a, b) -> scalar, or None when no perceptual network is configured
LPIPSHook = Callable[[object, object], Optional[float]]


def null_lpips(a, b):
    return None


def _np(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; ``inf`` when identical."""
    a, b = _np(a), _np(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x: np.ndarray, g1: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of (H, W) ``x`` with the 1-D kernel ``g1``."""
    n = g1.shape[0]
    rows = sum(g1[i] * x[i:x.shape[0] - n + 1 + i] for i in range(n))
    return sum(g1[j] * rows[:, j:rows.shape[1] - n + 1 + j] for j in range(n))


def _as_hwc(a):
    return a[..., None] if a.ndim == 2 else a


def ssim(a, b, data_range: float = 1.0) -> float:
    """Mean SSIM over channels and valid window positions."""
    a, b = _as_hwc(_np(a)), _as_hwc(_np(b))
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    g1 = np.exp(-(x ** 2) / (2 * SSIM_SIGMA ** 2))
    g1 /= g1.sum()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[2]):
        x_, y_ = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x_, g1), _filter_valid(y_, g1)
        sxx = _filter_valid(x_ * x_, g1) - mx * mx
        syy = _filter_valid(y_ * y_, g1) - my * my
        sxy = _filter_valid(x_ * y_, g1) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


def ssim_reference(a, b, data_range: float = 1.0) -> float:
    """Direct per-window evaluation; slow, used to cross-check :func:`ssim`."""
    a, b = _as_hwc(_np(a)), _as_hwc(_np(b))
    w = gaussian_window()
    n = SSIM_WINDOW
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    H, W, C = a.shape
    total, count = 0.0, 0
    for ch in range(C):
        for i in range(H - n + 1):
            for j in range(W - n + 1):
                pa = a[i:i + n, j:j + n, ch]
                pb = b[i:i + n, j:j + n, ch]
                mx = (w * pa).sum()
                my = (w * pb).sum()
                vx = (w * (pa - mx) ** 2).sum()
                vy = (w * (pb - my) ** 2).sum()
                cxy = (w * (pa - mx) * (pb - my)).sum()
                total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (vx + vy + c2))
                count += 1
    return total / count


def pcc(da, db, valid=None) -> float:
    """Pearson correlation over valid pixels; ``nan`` if either side is constant."""
    x, y = _np(da).reshape(-1), _np(db).reshape(-1)
    if valid is not None:
        m = _np(valid).reshape(-1) > 0
        x, y = x[m], y[m]
    if x.size < 2:
        return math.nan
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float((x * x).sum()) * float((y * y).sum()))
    if den == 0.0:
        return math.nan
    return float(np.clip((x * y).sum() / den, -1.0, 1.0))


@dataclass
class ViewMetrics:
    psnr: float
    ssim: float
    pcc: float
    lpips: Optional[float] = None


@dataclass
class MetricReport:
    psnr: float
    ssim: float
    pcc: float
    lpips: Optional[float] = None
    n_views: int = 0
    n_psnr_infinite: int = 0
    n_pcc_undefined: int = 0
    per_view: list[ViewMetrics] = field(default_factory=list)
    view_names: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("psnr", "ssim", "pcc"):
            if isinstance(d[k], float) and not math.isfinite(d[k]):
                d[k] = str(d[k])
        for v in d["per_view"]:
            for k in ("psnr", "pcc"):
                if not math.isfinite(v[k]):
                    v[k] = str(v[k])
        return d


def evaluate_view(rgb, gt_rgb, depth, gt_depth, valid=None, lpips: LPIPSHook = null_lpips) -> ViewMetrics:
    return ViewMetrics(psnr(rgb, gt_rgb), ssim(rgb, gt_rgb), pcc(depth, gt_depth, valid), lpips(rgb, gt_rgb))


def aggregate(views: list[ViewMetrics]) -> MetricReport:
    """Mean over views; infinite PSNR and undefined PCC are excluded and counted."""
    ps = [v.psnr for v in views if math.isfinite(v.psnr)]
    pc = [v.pcc for v in views if math.isfinite(v.pcc)]
    lp = [v.lpips for v in views if v.lpips is not None]
    return MetricReport(
        psnr=float(np.mean(ps)) if ps else (math.inf if views else math.nan),
        ssim=float(np.mean([v.ssim for v in views])) if views else math.nan,
        pcc=float(np.mean(pc)) if pc else math.nan,
        lpips=float(np.mean(lp)) if lp else None,
        n_views=len(views),
        n_psnr_infinite=len(views) - len(ps),
        n_pcc_undefined=len(views) - len(pc),
        per_view=list(views),
    )
