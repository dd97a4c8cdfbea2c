import dataclasses

import numpy as np
import pytest
import torch

from omnigs.harness.gradsuite import TINY_MODEL, TINY_VOLUME, tiny_sample
from omnigs.model import ModelConfig, OmniGaussian, depth_init_for, freeze_aux, step_loss
from omnigs.splat.gaussians import SOURCE_PIXEL, SOURCE_VOLUME
from omnigs.splat.render import RenderSettings


@pytest.fixture(scope="module")
def sample():
    return tiny_sample(0)


def _model(mode="full", **kw):
    torch.manual_seed(0)
    return OmniGaussian(dataclasses.replace(TINY_MODEL, mode=mode, **kw), TINY_VOLUME)


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        ModelConfig(mode="both")


@pytest.mark.parametrize("mode", ["full", "pixel", "volume"])
def test_modes_produce_expected_sources(sample, mode):
    m = _model(mode)
    d = depth_init_for(sample, 0.0, 0)
    with torch.no_grad():
        out = m(sample.input_images, sample.input_cams, d)
    src = out.gaussians.source
    assert (out.pixel is not None) == (mode != "volume")
    assert (out.volume is not None) == (mode != "pixel")
    assert bool((src == SOURCE_PIXEL).any()) == (mode != "volume")
    assert bool((src == SOURCE_VOLUME).any()) == (mode != "pixel")
    assert out.gaussians.features is None
    out.gaussians.check()


def test_single_branch_step_has_no_volume_terms(sample):
    for mode in ("pixel", "volume"):
        r = step_loss(_model(mode), sample, depth_init_for(sample, 0.0, 0), [0], [0])
        assert r.masks is None and r.report.values()["volume_total"] == 0.0


def test_full_step_loss_backprops_and_recomposes(sample):
    m = _model("full")
    r = step_loss(m, sample, depth_init_for(sample, 0.0, 0), [0], [0, 1])
    assert r.report.recomposition_error() < 1e-12
    assert r.masks.masks.shape[0] == 2 and r.volume_rgb.shape[0] == 2
    r.report.total.backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.triplane.parameters())
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in m.pixel_head.parameters())


def test_frozen_aux_reproduces_fresh_masks(sample):
    m = _model("full")
    d = depth_init_for(sample, 0.0, 0)
    s = RenderSettings()
    fz = freeze_aux(m, sample, d, s)
    with torch.no_grad():
        a = step_loss(m, sample, d, [0], [1, 2], settings=s)
        b = step_loss(m, sample, d, [0], [1, 2], settings=s, frozen=fz)
    assert torch.equal(a.masks.masks, b.masks.masks)
    assert a.report.values() == b.report.values()


def test_depth_init_sigma_is_seeded(sample):
    a = depth_init_for(sample, 0.1, 3)
    assert np.array_equal(a, depth_init_for(sample, 0.1, 3))
    assert not np.array_equal(a, depth_init_for(sample, 0.1, 4))
    assert np.all(np.isfinite(depth_init_for(sample, 0.0, 0)))
