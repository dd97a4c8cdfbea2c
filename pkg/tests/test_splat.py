import numpy as np
import pytest
import torch

from omnigs.geometry import CameraModel
from omnigs.harness.gradsuite import check_render, random_scene
from omnigs.splat import (GaussianSet, RenderSettings, SortOrderTape, brute_force_render, covariance_3d,
                          export_ply, import_ply, merge_gaussians, project_splats, quat_to_rotmat, read_pfm,
                          read_ppm, render, write_pfm, write_ppm)
from omnigs.splat.io import read_ply_records

CAM = CameraModel(24.0, 24.0, 16.0, 16.0, 32, 32)


def _one(mean, color, opacity=0.9, scale=0.5):
    t = lambda v: torch.tensor(v, dtype=torch.float64)
    return GaussianSet(t([mean]), t([opacity]), t([[scale] * 3]), t([[1.0, 0, 0, 0]]), t([color]),
                       torch.zeros(1, dtype=torch.long))


def test_quaternion_rotation_orthonormal():
    q = torch.randn(20, 4)
    R = quat_to_rotmat(q)
    torch.testing.assert_close(R @ R.transpose(1, 2), torch.eye(3).expand(20, 3, 3))
    cov = covariance_3d(torch.rand(20, 3) + 0.1, q)
    assert torch.all(torch.linalg.eigvalsh(cov) > 0)


def test_empty_set_renders_background():
    out = render(GaussianSet.empty(), CAM, background=(0.2, 0.3, 0.4))
    assert torch.equal(out.rgb, torch.tensor([0.2, 0.3, 0.4]).expand(32, 32, 3))
    assert torch.equal(out.alpha, torch.zeros(32, 32))


def test_energy_bounds():
    for s in range(5):
        out = render(random_scene(40, s), CAM)
        assert out.rgb.min() >= 0 and out.rgb.max() <= 1
        assert out.alpha.min() >= 0 and out.alpha.max() <= 1


def test_behind_camera_is_culled():
    out = render(_one([0.0, 0.0, -3.0], [1, 1, 1]), CAM)
    assert torch.equal(out.alpha, torch.zeros(32, 32))
    assert not project_splats(_one([0.0, 0.0, -3.0], [1, 1, 1]), CAM).valid.any()


def test_opaque_near_splat_hides_far_one():
    # alpha is capped at 0.999, so two stacked near splats drive T below the 1e-4 stop
    near = [_one([0.0, 0.0, z], [1.0, 0, 0], opacity=0.9999, scale=2.0) for z in (3.0, 3.1)]
    far = _one([0.0, 0.0, 6.0], [0, 0, 1.0], opacity=0.9999, scale=2.0)
    c = render(merge_gaussians(far, *near), CAM).rgb[16, 16]
    assert c[0] > 0.999 and c[2] == 0.0


def test_order_invariance():
    gs = random_scene(30, 3)
    perm = torch.randperm(30, generator=torch.Generator().manual_seed(0))
    a = render(gs, CAM, settings=RenderSettings.exact())
    b = render(gs.select(perm), CAM, settings=RenderSettings.exact())
    torch.testing.assert_close(a.rgb, b.rgb, rtol=0, atol=1e-14)


def test_tiled_matches_brute_force_with_skip():
    gs = random_scene(64, 11)
    a, b = render(gs, CAM), brute_force_render(gs, CAM)
    assert (a.rgb - b.rgb).abs().max() < 1e-5


def test_backward_matches_autograd_oracle():
    gs = random_scene(10, 4)
    for t in (gs.means, gs.opacities, gs.scales, gs.quats, gs.colors):
        t.requires_grad_(True)
    w = torch.rand(32, 32, 3, generator=torch.Generator().manual_seed(9), dtype=torch.float64)
    ex = RenderSettings.exact()
    ga = torch.autograd.grad((render(gs, CAM, settings=ex).rgb * w).sum(), [gs.means, gs.scales, gs.colors])
    gb = torch.autograd.grad((brute_force_render(gs, CAM, settings=ex).rgb * w).sum(),
                             [gs.means, gs.scales, gs.colors])
    for x, y in zip(ga, gb):
        torch.testing.assert_close(x, y, rtol=1e-9, atol=1e-12)


def test_renderer_gradient_check():
    r = check_render(1, n=8)
    assert r.passed, r.line()


def test_sort_tape_replays_order():
    gs = random_scene(20, 2)
    tape = SortOrderTape()
    with tape.record():
        a = render(gs, CAM)
    assert len(tape.orders) == 1
    with tape.replay():
        b = render(gs, CAM)
    assert torch.equal(a.rgb, b.rgb)
    with pytest.raises(RuntimeError):
        with tape.replay():
            render(gs, CAM)
            render(gs, CAM)


def test_ply_layout_and_roundtrip(tmp_path):
    gs = random_scene(25, 5)
    gs.source[::2] = 1
    p = tmp_path / "g.ply"
    export_ply(gs, p)
    head = p.read_bytes().split(b"end_header\n")[0].decode()
    assert "element vertex 25" in head and "property float f_dc_0" in head and "property float opacity" in head
    back = import_ply(p)
    for k in ("means", "opacities", "scales", "quats", "colors"):
        torch.testing.assert_close(getattr(back, k), getattr(gs, k), rtol=1e-6, atol=1e-6)
    assert torch.equal(back.source, gs.source)
    # a set read from a file survives another export/import unchanged
    p2 = tmp_path / "g2.ply"
    export_ply(back, p2)
    assert p2.read_bytes() == p.read_bytes()
    again = import_ply(p2)
    for k in ("means", "opacities", "scales", "quats", "colors", "source"):
        assert torch.equal(getattr(again, k), getattr(back, k))


def test_ply_empty(tmp_path):
    p = tmp_path / "e.ply"
    export_ply(GaussianSet.empty(), p)
    assert len(read_ply_records(p)) == 0
    assert len(import_ply(p)) == 0


def test_pfm_ppm_roundtrip(tmp_path):
    d = np.random.default_rng(0).uniform(1, 20, (5, 7)).astype(np.float32)
    d[0, 0] = np.inf
    write_pfm(tmp_path / "d.pfm", d)
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), d)
    assert (tmp_path / "d.pfm").read_bytes().startswith(b"Pf\n7 5\n-1.0\n")
    img = np.random.default_rng(1).integers(0, 256, (5, 7, 3), dtype=np.uint8)
    write_ppm(tmp_path / "i.ppm", img)
    assert np.array_equal(read_ppm(tmp_path / "i.ppm"), img)


def test_merge_keeps_order_and_drops_partial_features():
    a, b = random_scene(3, 0), random_scene(4, 1)
    a.features = torch.zeros(3, 2)
    m = merge_gaussians(a, b)
    assert len(m) == 7 and m.features is None
    torch.testing.assert_close(m.means[3:], b.means)
