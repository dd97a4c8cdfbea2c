import numpy as np
import pytest
import torch

from omnigs.collaboration import (LossWeights, PlaneFusion, VolumeMaskSet, compose_loss, depth_alignment_loss,
                                  fuse_pixel_to_triplane, fusion_cells, masked_photometric_loss, total_loss)
from omnigs.diffcore import ops
from omnigs.geometry import voxel_to_world
from omnigs.splat.gaussians import GaussianSet
from omnigs.volume import Triplane


def _pixel_set(points, feats):
    n = len(points)
    t = lambda v: torch.as_tensor(np.asarray(v), dtype=torch.float64)
    return GaussianSet(t(points), torch.full((n,), 0.5), torch.full((n, 3), 0.1), t([[1.0, 0, 0, 0]] * n),
                       torch.full((n, 3), 0.5), torch.ones(n, dtype=torch.long), t(feats))


def _planes(spec, c=4, seed=0):
    g = torch.Generator().manual_seed(seed)
    return Triplane(torch.randn(spec.H, spec.W, c, generator=g), torch.randn(spec.Z, spec.H, c, generator=g),
                    torch.randn(spec.W, spec.Z, c, generator=g), spec)


def test_loss_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(volume=-1.0)


def test_all_ones_mask_equals_plain_mse():
    rng = torch.Generator().manual_seed(0)
    a, b = torch.rand(2, 6, 5, 3, generator=rng), torch.rand(2, 6, 5, 3, generator=rng)
    m = torch.ones(2, 6, 5)
    assert float(abs(masked_photometric_loss(a, b, m) - ops.mse_loss(a, b))) < 1e-15


def test_masked_loss_ignores_unmasked_pixels():
    a = torch.zeros(4, 4, 3)
    b = torch.zeros(4, 4, 3)
    b[0, 0] = 1.0
    m = torch.ones(4, 4)
    m[0, 0] = 0
    assert float(masked_photometric_loss(a, b, m)) == 0.0
    assert float(masked_photometric_loss(a, b, torch.zeros(4, 4))) == 0.0
    with pytest.raises(ValueError):
        masked_photometric_loss(a, b[:3], m)


def test_depth_alignment_stops_pixel_gradient():
    dv = torch.tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    dp = torch.tensor([[1.5, 2.0], [2.0, 0.0]], requires_grad=True)
    m = torch.tensor([[1.0, 1.0], [1.0, 0.0]])
    loss = depth_alignment_loss(dv, dp, m)
    assert float(loss.detach()) == pytest.approx(0.5)
    loss.backward()
    assert dp.grad is None
    assert torch.allclose(dv.grad, torch.tensor([[-1 / 3, 0.0], [1 / 3, 0.0]]), atol=1e-15)


def test_compose_loss_recomposes():
    w = LossWeights(0.1, 2.0, 0.3, 0.05)
    r = compose_loss(0.2, 0.4, 0.1, 0.7, 1.3, w)
    assert float(r.volume_total) == pytest.approx(0.1 + 0.3 * 0.7 + 0.05 * 1.3)
    assert float(r.total) == pytest.approx(0.2 + 0.1 * 0.4 + 2.0 * float(r.volume_total))
    assert r.recomposition_error() < 1e-15
    assert r.total.dtype == torch.float64


def test_total_loss_without_volume_has_zero_terms():
    a = torch.rand(1, 4, 4, 3)
    r = total_loss(a, torch.zeros_like(a))
    v = r.values()
    assert v["volume_total"] == 0.0 and v["total"] == pytest.approx(v["full_mse"])
    with pytest.raises(ValueError):
        total_loss(a[:0], a[:0])


def test_total_loss_with_masks():
    g = torch.Generator().manual_seed(1)
    nv, tgt = torch.rand(1, 4, 4, 3, generator=g), torch.rand(1, 4, 4, 3, generator=g)
    vr, it = torch.rand(2, 4, 4, 3, generator=g), torch.rand(2, 4, 4, 3, generator=g)
    vd, pd = torch.rand(2, 4, 4, generator=g), torch.rand(2, 4, 4, generator=g)
    masks = VolumeMaskSet((torch.rand(2, 4, 4, generator=g) > 0.5).double(), pd, torch.ones(2, 4, 4))
    r = total_loss(nv, tgt, vr, it, vd, masks)
    assert float(r.volume_mse) == pytest.approx(float(masked_photometric_loss(vr, it, masks.masks)))
    assert float(r.volume_depth) == pytest.approx(float(depth_alignment_loss(vd, pd, masks.masks)))
    assert r.recomposition_error() < 1e-15
    assert r.mask_fraction == masks.fractions


def test_fusion_touches_only_occupied_cells(spec):
    planes = _planes(spec)
    fusion = PlaneFusion(3, 4)
    p = voxel_to_world(spec, 2, 3, 1)
    outside = np.array([100.0, 0.0, 0.0])
    gp = _pixel_set([p, p, outside], [[1.0, 0, 0], [0, 1.0, 0], [5.0, 5.0, 5.0]])
    inside, cells = fusion_cells(gp, spec)
    assert list(inside) == [0, 1]
    out = fuse_pixel_to_triplane(gp, planes, fusion)
    mean = torch.tensor([[0.5, 0.5, 0.0]])
    for name, (r, c) in {"hw": (2, 3), "zh": (1, 2), "wz": (3, 1)}.items():
        diff = out[name] - planes[name]
        expect = fusion(name, mean)[0]
        assert torch.allclose(diff[r, c], expect, atol=1e-12)
        diff[r, c] = 0
        assert torch.count_nonzero(diff) == 0


def test_fusion_with_no_in_volume_gaussians_is_identity(spec):
    planes = _planes(spec)
    gp = _pixel_set([[100.0, 0, 0]], [[1.0, 2.0, 3.0]])
    out = fuse_pixel_to_triplane(gp, planes, PlaneFusion(3, 4))
    for name in ("hw", "zh", "wz"):
        assert torch.equal(out[name], planes[name])
    with pytest.raises(ValueError):
        fuse_pixel_to_triplane(gp.without_features(), planes, PlaneFusion(3, 4))
