"""Command-line entry point: ``omnigs {gen,train,eval,render,gradcheck}``.

Exit codes: 0 success, 2 invalid input (arguments, config, data, checkpoint or a
failed gradient check), 3 numerical abort during training.
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from ..geometry import CameraModel, look_rotation
from ..splat.io import export_ply, write_ppm, to_uint8
from ..splat.render import render
from .checkpoint import CheckpointError, load_checkpoint
from .config import ConfigError, RunConfig
from .dataset import generate_dataset, load_bin

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 2, 3
GEN_CASES = ("1", "2", "3", "4", "mix", "cycle")

log = logging.getLogger("omnigs")


def _threads():
    n = os.environ.get("OMNI_THREADS")
    if n is None:
        return
    try:
        k = int(n)
    except ValueError:
        raise ConfigError(f"OMNI_THREADS must be an integer, got {n!r}") from None
    if k < 1:
        raise ConfigError("OMNI_THREADS must be >= 1")
    torch.set_num_threads(k)


def pose_camera(pose, like: CameraModel) -> CameraModel:
    """Camera at world ``(x, y, z)`` with yaw/pitch/roll in degrees, intrinsics taken from ``like``.

    Yaw turns about +z from +x, pitch tilts the optical axis up, roll turns about it.
    """
    x, y, z, yaw, pitch, roll = (float(v) for v in pose)
    cy, sy = math.cos(math.radians(yaw)), math.sin(math.radians(yaw))
    cp, sp = math.cos(math.radians(pitch)), math.sin(math.radians(pitch))
    R = look_rotation((cp * cy, cp * sy, sp))
    cr, sr = math.cos(math.radians(roll)), math.sin(math.radians(roll))
    R = np.array([[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]]) @ R
    center = np.array([x, y, z])
    return CameraModel(like.fx, like.fy, like.cx, like.cy, like.width, like.height, R, -R @ center)


def cmd_gen(a) -> int:
    paths = generate_dataset(a.case, a.n, a.seed, a.out)
    print(f"wrote {len(paths)} bins to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    from .train import Trainer

    cfg = RunConfig.load(a.config) if a.config else RunConfig()
    if a.steps is not None:
        cfg = cfg.replace(train={"steps": a.steps})
    res = Trainer(cfg, a.data, a.out, resume=a.resume).run()
    print(f"trained to step {res.store.step}; checkpoint {res.checkpoint}")
    return EXIT_OK


def cmd_eval(a) -> int:
    from .evaluate import evaluate

    rep = evaluate(a.ckpt, a.data, a.report, views=a.views)
    print(json.dumps({"psnr": rep.psnr, "ssim": rep.ssim, "pcc": rep.pcc, "n_views": rep.n_views}))
    return EXIT_OK


def cmd_render(a) -> int:
    from .train import check_sample, init_depth_for, model_from_checkpoint

    ck = load_checkpoint(a.ckpt)
    cfg = ck.config
    model = model_from_checkpoint(ck)
    s = load_bin(a.scene, cfg.torch_dtype)
    check_sample(cfg, s)
    cam = pose_camera(a.pose, s.input_cams[0])
    with torch.no_grad():
        out = model(s.input_images, s.input_cams, init_depth_for(cfg, s))
        img = render(out.gaussians, cam, cfg.train.background).rgb
    p = Path(a.out)
    write_ppm(p, to_uint8(img))
    ply = p.with_suffix(".ply")
    export_ply(out.gaussians, ply)
    print(f"wrote {p} and {ply} ({len(out.gaussians)} Gaussians)")
    return EXIT_OK


def cmd_gradcheck(a) -> int:
    from .gradsuite import MODULES, run_suite

    mods = MODULES if a.module in (None, "all") else (a.module,)
    results = run_suite(mods, seed=a.seed)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print("gradcheck:", "PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_INVALID


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="omnigs", description="Omni-Gaussian reconstruction: data, training, evaluation and checks")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen", help="generate synthetic bins")
    g.add_argument("--case", choices=GEN_CASES, required=True, help="failure case; 'cycle' rotates 1-4")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="RunConfig JSON (defaults when omitted)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="override train.steps")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--views", choices=("novel", "input"), default="novel")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="render a bin from an arbitrary pose and export the Gaussians")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--scene", required=True, help="bin directory supplying the input views")
    r.add_argument("--pose", required=True, nargs=6, type=float, metavar=("X", "Y", "Z", "YAW", "PITCH", "ROLL"))
    r.add_argument("--out", required=True, help="output image (.ppm); the PLY goes next to it")
    r.set_defaults(fn=cmd_render)

    c = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    c.add_argument("--module", choices=("all", "ops", "render", "loss"), default="all")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    from .train import NumericalAbort

    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _threads()
        return a.fn(a)
    except NumericalAbort as e:
        print(f"numerical abort: {e}" + (f" (dump: {e.dump_path})" if e.dump_path else ""), file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
