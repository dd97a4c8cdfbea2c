import json
import math

import numpy as np
import pytest

from omnigs.metrics import ViewMetrics, aggregate, evaluate_view, pcc, psnr, ssim, ssim_reference


def test_psnr_known_value():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.1)
    assert psnr(a, b) == pytest.approx(20.0)
    assert psnr(a, a) == math.inf


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))
    with pytest.raises(ValueError):
        ssim(np.zeros((16, 16, 3)), np.zeros((16, 15, 3)))


def test_ssim_small_image_raises():
    with pytest.raises(ValueError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_matches_reference_loop():
    rng = np.random.default_rng(0)
    a = rng.random((16, 18, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim_reference(a, b), abs=1e-10)
    assert ssim(a, b) < 1.0


def test_pcc_cases():
    x = np.arange(10.0)
    assert pcc(x, 3 * x + 1) == pytest.approx(1.0)
    assert pcc(x, -x) == pytest.approx(-1.0)
    assert math.isnan(pcc(np.ones(10), x))
    m = np.zeros(10)
    m[:3] = 1
    y = x.copy()
    y[3:] = 0
    assert pcc(x, y, m) == pytest.approx(1.0)
    m[:] = 0
    m[0] = 1
    assert math.isnan(pcc(x, y, m))


def test_aggregate_excludes_and_counts():
    views = [ViewMetrics(20.0, 0.5, 0.8), ViewMetrics(math.inf, 1.0, math.nan), ViewMetrics(30.0, 0.7, 0.6)]
    rep = aggregate(views)
    assert rep.psnr == pytest.approx(25.0)
    assert rep.ssim == pytest.approx(0.7333333333333)
    assert rep.pcc == pytest.approx(0.7)
    assert (rep.n_views, rep.n_psnr_infinite, rep.n_pcc_undefined) == (3, 1, 1)
    assert rep.lpips is None


def test_aggregate_all_identical_and_empty():
    rep = aggregate([ViewMetrics(math.inf, 1.0, 1.0)])
    assert rep.psnr == math.inf
    assert math.isnan(aggregate([]).psnr)


def test_report_to_dict_is_json():
    rep = aggregate([ViewMetrics(math.inf, 1.0, math.nan)])
    d = json.loads(json.dumps(rep.to_dict(), allow_nan=False))
    assert d["psnr"] == "inf" and d["pcc"] == "nan"
    assert d["per_view"][0]["psnr"] == "inf"


def test_evaluate_view_uses_lpips_hook():
    rng = np.random.default_rng(1)
    img = rng.random((12, 12, 3))
    d = rng.random((12, 12))
    v = evaluate_view(img, img, d, d, lpips=lambda a, b: 0.25)
    assert v.psnr == math.inf and v.pcc == pytest.approx(1.0) and v.lpips == 0.25
