"""Bin generation, ground-truth rendering and the on-disk dataset layout.

A dataset directory holds one sub-directory per bin::

    bin_00012/
        manifest.json            cameras, scene spec, case checks
        input_0.ppm ... input_5.ppm
        input_0.pfm ...          camera-z depth (inf where nothing is hit)
        novel_0_0.ppm ...        frame f, camera k
        novel_0_0.pfm ...
"""
from __future__ import annotations

import json
import logging
import math
from pathlib import Path

import numpy as np
import torch

from ..data import BinSample
from ..geometry import CameraModel
from ..splat.io import ensure_dir, read_pfm, read_ppm, to_uint8, write_pfm, write_ppm
from ..splat.render import RenderSettings, render
from .scenes import (CASES, SceneConfig, SceneSpec, backdrop_min_radius, build_scene, camera_cast,
                     scene_gaussians)

log = logging.getLogger(__name__)

GT_SETTINGS = RenderSettings().without_early_stop()
MAX_ATTEMPTS = 50


def novel_rigs(cfg: SceneConfig, traj: float, yaw0: float, center=(0.0, 0.0)):
    """Two rigs displaced by -bin/2 and +bin/2 along the trajectory direction."""
    h = cfg.bin_size / 2
    out = []
    for s in (-1.0, 1.0):
        c = (center[0] + s * h * math.cos(traj), center[1] + s * h * math.sin(traj))
        out.append(cfg.rig(c, yaw0))
    return out


def render_ground_truth(scene: SceneSpec, cams, cfg: SceneConfig):
    """Images from the scene's Gaussian samples and exact depth/ids from ray casting."""
    gs = scene_gaussians(scene, (0.0, 0.0, cfg.cam_height), cfg.focal)
    imgs, depths, ids = [], [], []
    for cam in cams:
        with torch.no_grad():
            out = render(gs, cam, (0.0, 0.0, 0.0), GT_SETTINGS)
        imgs.append(to_uint8(out.rgb))
        z, pid = camera_cast(scene, cam)
        depths.append(z.astype(np.float32))
        ids.append(pid)
    return imgs, depths, ids


def case_checks(scene: SceneSpec, in_ids, nv_ids, in_depth, cfg: SceneConfig) -> dict:
    """Geometric facts the case factories are meant to guarantee."""
    checks = {}
    if any(p.tag == "hidden" for p in scene.primitives):
        i = scene.index_of("hidden")
        checks["hidden_input_pixels"] = int(sum((ids == i).sum() for ids in in_ids))
        checks["hidden_novel_pixels_max"] = int(max((ids == i).sum() for ids in nv_ids))
    if any(p.tag == "pole" for p in scene.primitives):
        p = scene.primitives[scene.index_of("pole")]
        top = p.center[2] + p.size[1]
        dist = math.hypot(p.center[0], p.center[1]) - p.size[0]
        frustum_top = cfg.cam_height + dist * (cfg.height / 2) / cfg.focal
        checks["pole_top_truncated"] = bool(top > frustum_top)
    if any(p.tag == "backdrop" for p in scene.primitives):
        i = scene.index_of("backdrop")
        near_bd = math.inf
        for ids, z in zip(in_ids, in_depth):
            m = ids == i
            if m.any():
                near_bd = min(near_bd, float(z[m].min()))
        checks["backdrop_min_z"] = near_bd
        checks["backdrop_outside_volume"] = bool(scene.primitives[i].size[0] > backdrop_min_radius(scene.volume))
    return checks


def _case_ok(case: str, checks: dict) -> bool:
    if case in ("1", "mix") and not (checks["hidden_input_pixels"] == 0 and checks["hidden_novel_pixels_max"] > 100):
        return False
    if case in ("2", "mix") and not checks["pole_top_truncated"]:
        return False
    return True


def generate_bin(case: str, seed: int, cfg: SceneConfig = SceneConfig()):
    """Deterministic bin for ``(case, seed)``; retries sub-seeds until the case property holds."""
    for attempt in range(MAX_ATTEMPTS):
        sub = int(np.random.SeedSequence([seed, attempt]).generate_state(1)[0])
        scene, traj, yaw0 = build_scene(case, sub, cfg)
        in_cams = cfg.rig((0.0, 0.0), yaw0)
        nv_cams = [c for rig in novel_rigs(cfg, traj, yaw0) for c in rig]
        if case in ("1", "mix"):
            # cheap visibility test before rendering anything
            i = scene.index_of("hidden")
            in_px = sum(int((camera_cast(scene, c)[1] == i).sum()) for c in in_cams)
            nv_px = max(int((camera_cast(scene, c)[1] == i).sum()) for c in nv_cams)
            if in_px != 0 or nv_px <= 100:
                continue
        in_img, in_z, in_ids = render_ground_truth(scene, in_cams, cfg)
        nv_img, nv_z, nv_ids = render_ground_truth(scene, nv_cams, cfg)
        checks = case_checks(scene, in_ids, nv_ids, in_z, cfg)
        if _case_ok(case, checks):
            return {"scene": scene, "traj": traj, "yaw0": yaw0, "attempt": attempt, "checks": checks,
                    "input": (in_cams, in_img, in_z), "novel": (nv_cams, nv_img, nv_z)}
    raise RuntimeError(f"case {case} seed {seed}: no valid scene in {MAX_ATTEMPTS} attempts")


def write_bin(b: dict, out_dir, cfg: SceneConfig) -> Path:
    d = ensure_dir(out_dir)
    in_cams, in_img, in_z = b["input"]
    nv_cams, nv_img, nv_z = b["novel"]
    for k, (img, z) in enumerate(zip(in_img, in_z)):
        write_ppm(d / f"input_{k}.ppm", img)
        write_pfm(d / f"input_{k}.pfm", z)
    per = cfg.K
    for j, (img, z) in enumerate(zip(nv_img, nv_z)):
        write_ppm(d / f"novel_{j // per}_{j % per}.ppm", img)
        write_pfm(d / f"novel_{j // per}_{j % per}.pfm", z)
    manifest = {
        "format": 1,
        "scene": b["scene"].to_dict(),
        "trajectory_angle": b["traj"],
        "rig_yaw0": b["yaw0"],
        "attempt": b["attempt"],
        "checks": b["checks"],
        "bin_size": cfg.bin_size,
        "input_cameras": [c.to_dict() for c in in_cams],
        "novel_cameras": [c.to_dict() for c in nv_cams],
        "novel_frames": len(nv_cams) // per,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return d


def generate_dataset(case: str, n: int, seed: int, out_dir, cfg: SceneConfig = SceneConfig()) -> list[Path]:
    """``n`` bins; case ``mix`` cycles 1-4 per bin unless a single case is requested."""
    out = ensure_dir(out_dir)
    paths = []
    for i in range(n):
        bin_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        c = case
        if case == "cycle":
            c = CASES[i % 4]
        b = generate_bin(c, bin_seed, cfg)
        paths.append(write_bin(b, out / f"bin_{i:05d}", cfg))
        log.info("wrote bin %d (case %s)", i, c)
    return paths


def list_bins(data_dir) -> list[Path]:
    bins = sorted(p for p in Path(data_dir).iterdir() if (p / "manifest.json").exists())
    if not bins:
        raise FileNotFoundError(f"no bins under {data_dir}")
    return bins


def load_bin(path, dtype=torch.float64) -> BinSample:
    p = Path(path)
    m = json.loads((p / "manifest.json").read_text())
    spec = SceneSpec.from_dict(m["scene"])
    in_cams = [CameraModel.from_dict(c) for c in m["input_cameras"]]
    nv_cams = [CameraModel.from_dict(c) for c in m["novel_cameras"]]
    K = len(in_cams)
    img = lambda f: torch.as_tensor(read_ppm(p / f).astype(np.float64) / 255.0, dtype=dtype)
    in_img = torch.stack([img(f"input_{k}.ppm") for k in range(K)])
    in_z = np.stack([read_pfm(p / f"input_{k}.pfm") for k in range(K)])
    names = [f"novel_{j // K}_{j % K}" for j in range(len(nv_cams))]
    nv_img = torch.stack([img(f"{n}.ppm") for n in names])
    nv_z = np.stack([read_pfm(p / f"{n}.pfm") for n in names])
    return BinSample(p.name, in_img, in_z, in_cams, nv_img, nv_z, nv_cams, spec.volume,
                     {"case": spec.case, "checks": m["checks"], "scene": m["scene"]})
