"""Novel-view evaluation of a checkpoint over a dataset directory."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..metrics import MetricReport, aggregate, evaluate_view, null_lpips
from ..model import OmniGaussian
from ..splat.render import RenderSettings, render
from .checkpoint import Checkpoint, load_checkpoint
from .config import RunConfig
from .dataset import list_bins, load_bin
from .train import check_sample, init_depth_for, model_from_checkpoint


def _render_views(model: OmniGaussian, cfg: RunConfig, sample, cams, settings):
    with torch.no_grad():
        depth = init_depth_for(cfg, sample)
        out = model(sample.input_images, sample.input_cams, depth)
        return [render(out.gaussians, c, cfg.train.background, settings) for c in cams]


def evaluate_model(model: OmniGaussian, cfg: RunConfig, data_dir, settings: RenderSettings = RenderSettings(),
                   lpips=null_lpips, views: str = "novel") -> MetricReport:
    """Metrics over every bin in ``data_dir``; ``views`` is ``novel`` or ``input``."""
    per_view = []
    names = []
    model.eval()
    for path in list_bins(data_dir):
        s = load_bin(path, cfg.torch_dtype)
        check_sample(cfg, s)
        if views == "novel":
            cams, imgs, gt_z = s.novel_cams, s.novel_images, s.novel_depth
        elif views == "input":
            cams, imgs, gt_z = s.input_cams, s.input_images, s.input_depth
        else:
            raise ValueError(f"views must be 'novel' or 'input', got {views!r}")
        outs = _render_views(model, cfg, s, cams, settings)
        for j, o in enumerate(outs):
            z = np.asarray(gt_z[j], dtype=np.float64)
            per_view.append(evaluate_view(o.rgb.double(), imgs[j].double(), o.depth.double(), z,
                                          np.isfinite(z), lpips))
            names.append(f"{s.name}/{j}")
    rep = aggregate(per_view)
    rep.view_names = names
    return rep


def evaluate(ckpt, data_dir, report_path=None, settings: RenderSettings = RenderSettings(),
             views: str = "novel") -> MetricReport:
    ck = ckpt if isinstance(ckpt, Checkpoint) else load_checkpoint(ckpt)
    model = model_from_checkpoint(ck)
    rep = evaluate_model(model, ck.config, data_dir, settings, views=views)
    if report_path is not None:
        write_report(report_path, rep, {"step": ck.step, "mode": ck.config.model.mode, "views": views})
    return rep


def write_report(path, rep: MetricReport, extra: dict | None = None) -> Path:
    d = rep.to_dict()
    d.update(extra or {})
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(d, indent=1, sort_keys=True, allow_nan=False))
    return p
