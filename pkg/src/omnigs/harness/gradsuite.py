"""Finite-difference gradient checks for the op catalog, the renderer and the full objective.

Every check runs at float64. Op checks use small randomized shapes and test every
entry; the renderer and objective checks test a random subset of entries with the
piecewise decisions (alpha skip, early stop, masks, fusion cells) held fixed.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from ..collaboration import LossWeights
from ..diffcore import ops
from ..diffcore.gradcheck import GradCheckReport, gradient_check, random_entries
from ..diffcore.optim import ParameterStore
from ..geometry import CameraModel, VolumeSpec, look_rotation
from ..model import ModelConfig, OmniGaussian, depth_init_for, freeze_aux, step_loss
from ..splat.gaussians import GaussianSet
from ..splat.render import RenderSettings, SortOrderTape, render

F64 = torch.float64
OP_TOL = 1e-6
SYSTEM_TOL = 1e-4
OP_STEP = 1e-5
SYSTEM_STEP = 1e-5
PERTURB = 0.2


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport
    seconds: float

    @property
    def passed(self) -> bool:
        return self.report.passed

    def line(self) -> str:
        r = self.report
        n = sum(p.n_checked for p in r.params.values())
        return (f"{'PASS' if self.passed else 'FAIL'} {self.name}: max rel err {r.max_rel_err:.2e} "
                f"(tol {r.tol:.0e}, {n} entries, {self.seconds:.1f}s)")


def _t(g: torch.Generator, *shape, lo=-1.0, hi=1.0):
    return (lo + (hi - lo) * torch.rand(*shape, generator=g, dtype=F64)).requires_grad_(True)


def _weighted(out, g: torch.Generator):
    # magnitudes in [0.5, 1.5] keep every gradient entry well above finite-difference noise
    w = (0.5 + torch.rand(out.shape, generator=g, dtype=F64)) * torch.sign(torch.rand(out.shape, generator=g, dtype=F64) - 0.5)
    return lambda y: (w * y).sum()


def _dims(g, lo, hi, n):
    return [int(v) for v in torch.randint(lo, hi + 1, (n,), generator=g)]


def _case(fn: Callable, inputs: dict, g: torch.Generator):
    sink = _weighted(fn(), g)
    return (lambda: sink(fn())), inputs


def _op_cases(seed: int):
    """name -> (f, inputs) for every catalog op, shapes drawn from ``seed``."""
    g = torch.Generator().manual_seed(seed)
    cases = {}

    n, k, m = _dims(g, 2, 5, 3)
    a, b = _t(g, n, k), _t(g, k, m)
    cases["matmul"] = _case(lambda: ops.matmul(a, b), {"a": a, "b": b}, g)
    x, w, bias = _t(g, n, k), _t(g, m, k), _t(g, m)
    cases["linear"] = _case(lambda: ops.linear(x, w, bias), {"x": x, "w": w, "b": bias}, g)

    for stride, pad in ((1, "same"), (2, "same"), (1, "valid"), (2, "valid")):
        c_in, c_out = _dims(g, 1, 3, 2)
        h, wd = _dims(g, 5, 8, 2)
        xi, ker, bb = _t(g, 2, c_in, h, wd), _t(g, c_out, c_in, 3, 3), _t(g, c_out)
        cases[f"conv2d_s{stride}_{pad}"] = _case(
            lambda xi=xi, ker=ker, bb=bb, stride=stride, pad=pad: ops.conv2d(xi, ker, bb, stride, pad),
            {"x": xi, "w": ker, "b": bb}, g)

    c, h2, w2 = _dims(g, 1, 3, 1)[0], 2 * _dims(g, 2, 3, 1)[0], 2 * _dims(g, 2, 3, 1)[0]
    xp = _t(g, 2, c, h2, w2)
    cases["avg_pool2d"] = _case(lambda: ops.avg_pool2d(xp, 2), {"x": xp}, g)
    xu = _t(g, 1, c, 3, 4)
    cases["upsample_nearest"] = _case(lambda: ops.upsample_nearest(xu, 2), {"x": xu}, g)
    cases["upsample_bilinear"] = _case(lambda: ops.upsample_bilinear(xu, (7, 9)), {"x": xu}, g)

    shape = tuple(_dims(g, 2, 4, 2))
    p, q = _t(g, *shape), _t(g, *shape)
    cases["add"] = _case(lambda: ops.add(p, q), {"a": p, "b": q}, g)
    cases["sub"] = _case(lambda: ops.sub(p, q), {"a": p, "b": q}, g)
    cases["mul"] = _case(lambda: ops.mul(p, q), {"a": p, "b": q}, g)
    e = _t(g, *shape, lo=-3.0, hi=3.0)
    for name in ("sigmoid", "softplus", "tanh", "exp", "silu"):
        fn = getattr(ops, name)
        cases[name] = _case(lambda fn=fn: fn(e), {"x": e}, g)
    d = _dims(g, 3, 6, 1)[0]
    xl, lw, lb = _t(g, 3, d), _t(g, d, lo=0.5, hi=1.5), _t(g, d)
    cases["layer_norm"] = _case(lambda: ops.layer_norm(xl, lw, lb), {"x": xl, "w": lw, "b": lb}, g)
    xs = _t(g, 3, d, lo=-2.0, hi=2.0)
    cases["softmax_last"] = _case(lambda: ops.softmax(xs, -1), {"x": xs}, g)
    cases["softmax_first"] = _case(lambda: ops.softmax(xs, 0), {"x": xs}, g)
    c1, c2 = _t(g, 2, 3), _t(g, 2, 2)
    cases["concat"] = _case(lambda: ops.concat([c1, c2], -1), {"a": c1, "b": c2}, g)
    cases["mean"] = _case(lambda: ops.mean(p, 0), {"x": p}, g)
    cases["sum"] = _case(lambda: ops.sum(p, 1), {"x": p}, g)
    cases["mse_loss"] = (lambda: ops.mse_loss(p, q), {"a": p, "b": q})
    # keep |a - b| away from the kink of |.|
    offs = (torch.rand(shape, generator=g, dtype=F64) * 0.8 + 0.2) * torch.sign(torch.rand(shape, generator=g) - 0.5)
    l1a = _t(g, *shape)
    l1b = (l1a.detach() + offs).requires_grad_(True)
    cases["l1_loss"] = (lambda: ops.l1_loss(l1a, l1b), {"a": l1a, "b": l1b})

    vals = _t(g, 7, 3)
    idx = torch.tensor([0, 2, 2, 4, 0, 2, 1])
    cases["scatter_mean"] = _case(lambda: ops.scatter_mean(vals, idx, 6)[0], {"values": vals}, g)
    grid = _t(g, 2, 4, 5, 3)
    # sample points off the integer lattice, including the zero-padded border band
    coords = (torch.rand(9, 2, generator=g, dtype=F64) * torch.tensor([4.6, 5.6], dtype=F64) - 0.8)
    coords = (torch.floor(coords) + 0.1 + 0.8 * torch.frac(coords)).requires_grad_(True)
    batch = torch.randint(0, 2, (9,), generator=g)
    cases["bilinear_sample_2d"] = _case(lambda: ops.bilinear_sample_2d(grid, coords, batch),
                                        {"grid": grid, "coords": coords}, g)
    return cases


def check_ops(seed: int = 0, tol: float = OP_TOL) -> list[CheckResult]:
    out = []
    for name, (f, inputs) in _op_cases(seed).items():
        t0 = time.time()
        rep = gradient_check(f, inputs, step=OP_STEP, tol=tol)
        out.append(CheckResult(f"op {name}", rep, time.time() - t0))
    return out


def random_scene(n: int, seed: int) -> GaussianSet:
    g = torch.Generator().manual_seed(seed)
    r = lambda *s: torch.rand(*s, generator=g, dtype=F64)
    means = torch.stack([(r(n) - 0.5) * 3, (r(n) - 0.5) * 3, 3 + r(n) * 4], -1)
    quats = torch.randn(n, 4, generator=g, dtype=F64)
    quats = quats / quats.norm(dim=-1, keepdim=True)
    return GaussianSet(means, 0.2 + 0.7 * r(n), 0.1 + 0.4 * r(n, 3), quats, r(n, 3),
                       torch.zeros(n, dtype=torch.long))


def check_render(seed: int = 0, n: int = 12, n_entries: int = 60, tol: float = SYSTEM_TOL) -> CheckResult:
    """Render RGB, depth and alpha of a random scene and check all five Gaussian parameter groups."""
    gs = random_scene(n, seed)
    cam = CameraModel(18.0, 18.0, 12.0, 10.0, 24, 20)
    params = {"means": gs.means, "opacities": gs.opacities, "scales": gs.scales,
              "quats": gs.quats, "colors": gs.colors}
    for v in params.values():
        v.requires_grad_(True)
    settings = RenderSettings.exact()
    g = torch.Generator().manual_seed(seed + 1)
    wr, wd, wa = (torch.rand(20, 24, 3, generator=g, dtype=F64), torch.rand(20, 24, generator=g, dtype=F64),
                  torch.rand(20, 24, generator=g, dtype=F64))

    def f():
        s = GaussianSet(params["means"], params["opacities"], params["scales"], params["quats"],
                        params["colors"], gs.source)
        o = render(s, cam, (0.2, 0.3, 0.4), settings)
        return (wr * o.rgb).sum() + 0.1 * (wd * o.depth).sum() + (wa * o.alpha).sum()

    t0 = time.time()
    rep = gradient_check(f, params, step=SYSTEM_STEP, tol=tol, entries=random_entries(params, n_entries, seed))
    return CheckResult("renderer", rep, time.time() - t0)


# -- full objective -----------------------------------------------------------

TINY_MODEL = ModelConfig(channels=8, feat_channels=8, encoder_mid=4, unet_widths=(8, 8, 8),
                         unet_patches_down=(2, 2, 1), unet_patches_up=(1, 2, 2), unet_attn_dim=8, unet_heads=2,
                         n_heads=2, n_points_2d=(2, 2, 2), n_points_3d=(2, 2, 2), n_pillar=2,
                         layer_kinds=("cida+cpda", "cpda"), gaussians_per_voxel=1, voxel_hidden=8, pixel_hidden=4)
TINY_VOLUME = VolumeSpec(6, 6, 3, (-6.0, -6.0, -0.6), (6.0, 6.0, 2.4))


def tiny_sample(seed: int = 0, width: int = 32, height: int = 16):
    """A synthetic bin small enough for finite differences (two textured boxes plus a far wall)."""
    from .scenes import Primitive, SceneConfig, SceneSpec, camera_cast, make_ego_rig, scene_gaussians
    from ..data import BinSample

    cfg = SceneConfig(width=width, height=height, K=6, volume=TINY_VOLUME)
    prims = [
        Primitive("box", (2.5, 0.5, 0.4), (0.8, 0.8, 0.8), 0.3,
                  {"type": "checker", "period": 0.4, "color": [0.8, 0.3, 0.2], "color2": [0.2, 0.2, 0.7]}, "a"),
        Primitive("sphere", (-1.5, 2.0, 0.6), (0.6,), 0.0, {"type": "albedo", "color": [0.2, 0.6, 0.3]}, "b"),
        Primitive("backdrop", (0.0, 0.0, 0.0), (15.0,), 0.0,
                  {"type": "sky", "color": [0.3, 0.4, 0.7], "color2": [0.8, 0.7, 0.5], "waves": 3, "phase": 0.5,
                   "band_deg": 30.0}, "backdrop"),
    ]
    scene = SceneSpec(seed, "tiny", prims, cfg.volume)
    in_cams = make_ego_rig(width, height, cfg.hfov_deg, cfg.K, (0.0, 0.0, cfg.cam_height), 0.1)
    nv_cams = [c.moved((0.3, 0.1, 0.0)) for c in in_cams[:2]]
    gs = scene_gaussians(scene, (0.0, 0.0, cfg.cam_height), cfg.focal)

    def gt(cams):
        with torch.no_grad():
            imgs = torch.stack([render(gs, c, settings=RenderSettings().without_early_stop()).rgb for c in cams])
        z = np.stack([camera_cast(scene, c)[0] for c in cams])
        return imgs.clamp(0, 1), z

    ii, iz = gt(in_cams)
    ni, nz = gt(nv_cams)
    return BinSample("tiny", ii, iz, in_cams, ni, nz, nv_cams, cfg.volume, {"case": "tiny"})


def check_loss(seed: int = 0, n_entries: int = 64, tol: float = SYSTEM_TOL, cfg: ModelConfig = TINY_MODEL,
               sample=None) -> CheckResult:
    """Full objective (all four weighted terms) against a random subset of model parameters."""
    sample = sample if sample is not None else tiny_sample(seed)
    torch.manual_seed(seed)
    model = OmniGaussian(cfg, sample.spec).to(F64)
    store = ParameterStore.from_module(model)
    with torch.no_grad():
        # move off the zero-initialized heads so every branch carries gradient
        gen = torch.Generator().manual_seed(seed + 7)
        for p in store.params.values():
            p.add_(PERTURB * torch.randn(p.shape, generator=gen, dtype=F64))
    depth = torch.as_tensor(depth_init_for(sample, 0.1, seed), dtype=F64)
    settings = RenderSettings.exact()
    frozen = freeze_aux(model, sample, depth, settings)
    weights = LossWeights()

    def loss():
        return step_loss(model, sample, depth, None, None, weights, settings, frozen).report.total

    # finite differences must stay on the base point's depth order (see SortOrderTape)
    tape = SortOrderTape()
    with tape.record(), torch.no_grad():
        loss()

    def f():
        with tape.replay():
            return loss()

    t0 = time.time()
    rep = gradient_check(f, store, step=SYSTEM_STEP, tol=tol, entries=random_entries(store, n_entries, seed))
    return CheckResult("objective", rep, time.time() - t0)


MODULES = ("ops", "render", "loss")


def run_suite(modules=MODULES, seed: int = 0) -> list[CheckResult]:
    out = []
    for m in modules:
        if m == "ops":
            out.extend(check_ops(seed))
        elif m == "render":
            out.append(check_render(seed))
        elif m == "loss":
            out.append(check_loss(seed))
        else:
            raise ValueError(f"unknown gradcheck module {m!r}; choose from {MODULES}")
    return out
