import numpy as np
import pytest
import torch

from omnigs.geometry import VolumeSpec, project_point, voxel_to_world
from omnigs.harness.scenes import make_ego_rig
from omnigs.splat.gaussians import SOURCE_VOLUME
from omnigs.volume import (PLANES, DeformAttn, DeformAttnConfig, TriplaneEncoder, Triplane,
                           activate_voxel_gaussians, build_reference_points_2d, build_reference_points_3d,
                           cida, cida_per_view, decode_voxel_gaussians, sample_triplane_feature,
                           voxel_centers, VoxelGaussianHead)

SPEC = VolumeSpec(6, 6, 3, (-6.0, -6.0, -0.6), (6.0, 6.0, 2.4))


@pytest.fixture
def rig():
    return make_ego_rig(32, 16, 70.0, 6)


def _planes(c=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Triplane(*(torch.randn(*SPEC.plane_shape(n), c, generator=g) for n in PLANES), SPEC)


def test_reference_points_2d_count_correlated_views(rig):
    refs = build_reference_points_2d(SPEC, rig, n_pillar=3, plane="hw")
    assert refs.n_queries == SPEC.H * SPEC.W
    assert torch.all(refs.query[1:] >= refs.query[:-1])
    counts = torch.bincount(refs.query, minlength=refs.n_queries)
    assert torch.equal(counts, refs.k_prime)
    # each pair has at least one pillar point inside its view
    assert refs.valid.any(dim=1).all()


def test_reference_points_2d_match_projection(rig):
    refs = build_reference_points_2d(SPEC, rig, n_pillar=2, plane="hw", factor=2.0)
    i = 5
    q, k = int(refs.query[i]), int(refs.view[i])
    from omnigs.geometry import plane_pillar_points
    pts = plane_pillar_points(SPEC, "hw", 2).reshape(-1, 2, 3)[q]
    u, v, _, ok = project_point(rig[k], pts)
    exp = np.stack([v / 2.0 - 0.5, u / 2.0 - 0.5], -1)
    np.testing.assert_allclose(refs.coords[i].numpy()[ok], exp[ok], atol=1e-9)


def test_reference_points_3d_layout():
    r = build_reference_points_3d(SPEC, 4, "zh")
    rows, cols = SPEC.plane_shape("zh")
    assert r.planes[0] == "zh" and set(r.planes) == set(PLANES)
    assert r.coords.shape == (rows * cols, 3, 4, 2)
    # own-plane block repeats the query cell
    assert torch.equal(r.coords[cols + 2, 0, 0], torch.tensor([1.0, 2.0], dtype=r.coords.dtype))


def test_cida_leaves_unseen_queries_zero(rig):
    cfg = DeformAttnConfig(n_heads=2, n_points_2d=(4,), n_points_3d=(2,), n_pillar=2)
    refs = build_reference_points_2d(SPEC, rig[:1], 2, "hw", factor=4.0)
    attn = DeformAttn(8, 6, 2, 4, 2.0)
    q = torch.randn(refs.n_queries, 8)
    vals = attn.head_values(torch.randn(1, 4, 8, 6))
    out = cida(q, refs, vals, attn, 2)
    unseen = refs.k_prime == 0
    assert unseen.any()
    assert torch.equal(out[unseen], torch.zeros_like(out[unseen]))
    # a single correlated view: aggregate equals that view's output
    per = cida_per_view(q, refs, vals, attn, 2)
    torch.testing.assert_close(out[refs.query], per, rtol=0, atol=1e-15)


def test_sample_triplane_at_nodes_sums_planes():
    planes = _planes()
    h, w, z = 2, 3, 1
    p = voxel_to_world(SPEC, h, w, z)[None]
    f = sample_triplane_feature(planes, p)[0]
    exp = planes["hw"][h, w] + planes["zh"][z, h] + planes["wz"][w, z]
    torch.testing.assert_close(f, exp, rtol=0, atol=1e-14)


def test_voxel_activation_ranges():
    raw = torch.randn(40, 3, 14) * 5
    centers = voxel_centers(SPEC)[:40]
    means, op, sc, q, col = activate_voxel_gaussians(raw, centers, SPEC.voxel_size)
    off = (means.reshape(40, 3, 3) - torch.as_tensor(centers)[:, None]).abs()
    assert torch.all(off <= torch.as_tensor(SPEC.voxel_size) / 2 + 1e-12)
    assert torch.all((op > 0) & (op < 1)) and torch.all(sc > 0)
    torch.testing.assert_close(q.norm(dim=-1), torch.ones(120))
    assert torch.all((col > 0) & (col < 1))


def test_zero_raw_gives_half_voxel_scale():
    raw = torch.zeros(2, 1, 14)
    _, _, sc, q, _ = activate_voxel_gaussians(raw, voxel_centers(SPEC)[:2], SPEC.voxel_size)
    torch.testing.assert_close(sc[0], torch.as_tensor(SPEC.voxel_size / 2))
    assert torch.equal(q[0], torch.tensor([1.0, 0, 0, 0]))


def test_decode_counts_and_source():
    head = VoxelGaussianHead(8, 8, 2)
    gv = decode_voxel_gaussians(_planes(), head, chunk=37)
    assert len(gv) == SPEC.H * SPEC.W * SPEC.Z * 2
    assert gv.count(SOURCE_VOLUME) == len(gv)
    gv.check()


def test_encoder_runs_and_is_differentiable(rig):
    cfg = DeformAttnConfig(n_heads=2, n_points_2d=(2, 2), n_points_3d=(2, 2), n_pillar=2)
    enc = TriplaneEncoder(SPEC, 8, 6, cfg, ("cida+cpda", "cpda"))
    from omnigs.volume import build_view_references
    feats = torch.randn(6, 4, 8, 6, requires_grad=True)
    out = enc(feats, build_view_references(SPEC, rig, cfg, 4.0))
    assert out["hw"].shape == (6, 6, 8)
    out["hw"].sum().backward()
    assert feats.grad is not None and feats.grad.abs().sum() > 0
