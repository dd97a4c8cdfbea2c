import numpy as np
import pytest
import torch

from omnigs.geometry import unproject_pixel, pixel_grid
from omnigs.harness.gradsuite import tiny_sample
from omnigs.model import along_ray_depth
from omnigs.pixel import (FeatureMapSet, ImageEncoder, MultiViewUNet, PatchCrossAttention, PixelGaussianHead,
                          _fold, _unfold, decode_pixel_gaussians, depth_init_oracle, encode_images,
                          plucker_maps, soft_clamp)
from omnigs.splat.gaussians import SOURCE_PIXEL
from omnigs.splat.render import render


@pytest.fixture(scope="module")
def sample():
    return tiny_sample(0)


def test_encoder_downsamples_by_four():
    f = encode_images(torch.rand(2, 16, 32, 3), ImageEncoder(8, 4))
    assert f.shape == (2, 4, 8, 8) and f.factor == 4
    with pytest.raises(ValueError):
        encode_images(torch.rand(2, 18, 32, 3), ImageEncoder(8, 4))


def test_fold_unfold_inverse():
    x = torch.randn(3, 5, 8, 12)
    assert torch.equal(_unfold(_fold(x, 4), 4, 5, 8, 12), x)


def test_cross_attention_is_view_permutation_equivariant():
    torch.manual_seed(0)
    blk = PatchCrossAttention(4, 2, d_attn=8, n_heads=2)
    x = torch.randn(3, 4, 4, 6)
    perm = [2, 0, 1]
    torch.testing.assert_close(blk(x)[perm], blk(x[perm]), rtol=0, atol=1e-12)


def test_cross_attention_mixes_views():
    torch.manual_seed(1)
    blk = PatchCrossAttention(4, 2, d_attn=8, n_heads=2)
    with torch.no_grad():
        for p in blk.parameters():
            p.add_(0.3 * torch.randn(p.shape))
    x = torch.randn(2, 4, 4, 4)
    y = x.clone()
    y[1] = torch.randn(4, 4, 4)
    # changing view 1 changes view 0's output
    assert not torch.allclose(blk(x)[0], blk(y)[0])


def test_unet_shapes(sample):
    net = MultiViewUNet(8, (8, 8), (2, 1), (1, 2), d_attn=8, n_heads=2)
    pl = plucker_maps(sample.input_cams, 4)
    assert pl.shape == (6, 4, 8, 6)
    out = net(torch.randn(6, 8, 4, 8), pl.permute(0, 3, 1, 2))
    assert out.shape == (6, 8, 4, 8)


def test_soft_clamp_bounded():
    x = torch.linspace(-100, 100, 11)
    y = soft_clamp(x, 0.5)
    assert torch.all(y.abs() <= 0.5)
    torch.testing.assert_close(soft_clamp(torch.tensor([1e-6]), 0.5), torch.tensor([1e-6]))


def test_zero_head_places_gaussians_on_init_depth(sample):
    K, H, W = sample.input_images.shape[:3]
    d = along_ray_depth(sample.input_cams, sample.input_depth)
    feats = FeatureMapSet(torch.randn(K, H // 4, W // 4, 8), 4)
    head = PixelGaussianHead(8, 4).zero_()
    out = decode_pixel_gaussians(feats, sample.input_cams, d, head, sample.input_images)
    gs = out.gaussians
    assert len(gs) == K * H * W and gs.count(SOURCE_PIXEL) == len(gs)
    u, v = pixel_grid(sample.input_cams[2])
    exp = unproject_pixel(sample.input_cams[2], u, v, d[2]).reshape(-1, 3)
    got = gs.means.detach().reshape(K, H * W, 3)[2].numpy()
    np.testing.assert_allclose(got, exp, rtol=1e-10, atol=1e-9)
    torch.testing.assert_close(gs.opacities, torch.full((len(gs),), 0.5))
    torch.testing.assert_close(gs.colors, sample.input_images.reshape(-1, 3).clamp(0.01, 0.99))
    gs.check()


def test_zero_head_reproduces_input_depth():
    # desk-scale resolution; at 32 px wide neighbor blending alone biases camera-z by ~2%
    sample = tiny_sample(0, 112, 64)
    K, H, W = sample.input_images.shape[:3]
    d = along_ray_depth(sample.input_cams, sample.input_depth)
    feats = FeatureMapSet(torch.zeros(K, H // 4, W // 4, 8), 4)
    out = decode_pixel_gaussians(feats, sample.input_cams, d, PixelGaussianHead(8, 4).zero_(), sample.input_images)
    errs = []
    for k, cam in enumerate(sample.input_cams):
        z = sample.input_depth[k]
        r = render(out.gaussians.detach(), cam).depth.numpy()
        ok = np.isfinite(z)
        errs.append(np.abs(r[ok] - z[ok]) / z[ok])
    assert np.median(np.concatenate(errs)) < 0.01


def test_depth_free_path_is_positive(sample):
    K, H, W = sample.input_images.shape[:3]
    feats = FeatureMapSet(torch.randn(K, H // 4, W // 4, 8), 4)
    out = decode_pixel_gaussians(feats, sample.input_cams, None, PixelGaussianHead(8, 4),
                                 sample.input_images, use_depth_init=False)
    assert torch.all(out.depth > 0)


def test_depth_init_shape_checked(sample):
    K, H, W = sample.input_images.shape[:3]
    feats = FeatureMapSet(torch.zeros(K, H // 4, W // 4, 8), 4)
    with pytest.raises(ValueError):
        decode_pixel_gaussians(feats, sample.input_cams, np.ones((K, H, W + 1)), PixelGaussianHead(8, 4),
                               sample.input_images)


def test_depth_oracle_noise():
    gt = np.full((4, 50, 50), 5.0)
    assert np.array_equal(depth_init_oracle(gt, 0.0, 0), gt)
    n = np.log(depth_init_oracle(gt, 0.1, 3) / 5.0)
    assert abs(n.std() - 0.1) < 0.005 and abs(n.mean()) < 0.005
    assert np.array_equal(depth_init_oracle(gt, 0.1, 3), depth_init_oracle(gt, 0.1, 3))
    with pytest.raises(ValueError):
        depth_init_oracle(gt, -1.0, 0)
