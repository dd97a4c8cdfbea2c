import math

import pytest
import torch

from omnigs.diffcore import ops
from omnigs.diffcore.gradcheck import gradient_check, random_entries, rel_err
from omnigs.diffcore.optim import ParameterStore, Schedule, adam_cosine_step, lr_factor
from omnigs.harness.gradsuite import OP_TOL, _op_cases, check_ops


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_catalog_ops_pass_gradient_check(seed):
    for r in check_ops(seed):
        assert r.passed, r.line()


def test_catalog_covers_every_op():
    names = set(_op_cases(0))
    for op in ("matmul", "linear", "avg_pool2d", "upsample_nearest", "upsample_bilinear", "add", "sub",
               "mul", "sigmoid", "softplus", "tanh", "exp", "silu", "layer_norm", "concat", "mean",
               "sum", "mse_loss", "l1_loss", "scatter_mean", "bilinear_sample_2d"):
        assert any(n.startswith(op) for n in names), op
    assert sum(n.startswith("conv2d") for n in names) == 4


def test_gradient_check_catches_wrong_gradient():
    class Bad(torch.autograd.Function):
        @staticmethod
        def forward(ctx, x):
            ctx.save_for_backward(x)
            return x ** 2

        @staticmethod
        def backward(ctx, g):
            (x,) = ctx.saved_tensors
            return g * 2.2 * x

    x = torch.randn(5, requires_grad=True)
    rep = gradient_check(lambda: Bad.apply(x).sum(), x, tol=OP_TOL)
    assert not rep.passed
    assert rep.max_rel_err > 0.05


def test_rel_err_floor():
    assert rel_err(0.0, 0.0) == 0.0
    assert rel_err(1e-14, 0.0) == pytest.approx(1e-2)


def test_random_entries_spread():
    params = {"a": torch.zeros(10), "b": torch.zeros(3, 4)}
    e = random_entries(params, 22, seed=3)
    assert sum(len(v) for v in e.values()) == 22
    assert sorted(e["a"]) == list(range(10))


def test_bilinear_sample_matches_lattice_and_zero_pads():
    grid = torch.arange(12.0).reshape(3, 4, 1).repeat(1, 1, 2)  # (H, W, C=2), node (i, j) holds 4i + j
    coords = torch.tensor([[0.0, 0.0], [2.0, 3.0], [0.5, 1.5], [-1.0, 0.0]])
    out = ops.bilinear_sample_2d(grid, coords)
    assert out.shape == (4, 2)
    assert out[0, 0] == 0.0 and out[1, 0] == 11.0
    assert out[2, 0] == pytest.approx(0.5 * (1.5 + 5.5))
    assert out[3, 0] == 0.0


def test_scatter_mean_empty_bins_zero():
    v = torch.tensor([[1.0], [3.0], [5.0]])
    idx = torch.tensor([0, 0, 2])
    m, count = ops.scatter_mean(v, idx, 4)
    assert m.squeeze(1).tolist() == [2.0, 0.0, 5.0, 0.0]
    assert count.tolist() == [2, 0, 1, 0]


def test_lr_factor_shape():
    assert lr_factor(1, 10, 100) == pytest.approx(0.1)
    assert lr_factor(10, 10, 100) == pytest.approx(1.0)
    assert lr_factor(55, 10, 100) == pytest.approx(0.5)
    assert lr_factor(100, 10, 100) == pytest.approx(0.0, abs=1e-15)
    assert lr_factor(500, 10, math.inf) == 1.0


def test_adam_matches_torch_adamw():
    torch.manual_seed(0)
    mod = torch.nn.Linear(4, 3)
    ref = torch.nn.Linear(4, 3)
    ref.load_state_dict(mod.state_dict())
    store = ParameterStore.from_module(mod)
    sched = Schedule(1e-2, 0, math.inf)
    opt = torch.optim.AdamW(ref.parameters(), lr=1e-2, weight_decay=0.01, eps=1e-8)
    x = torch.randn(8, 4)
    for _ in range(5):
        store.zero_grad()
        (mod(x) ** 2).mean().backward()
        adam_cosine_step(store, schedule=sched, clip_norm=None)
        opt.zero_grad()
        (ref(x) ** 2).mean().backward()
        opt.step()
    for a, b in zip(mod.parameters(), ref.parameters()):
        torch.testing.assert_close(a, b, rtol=1e-12, atol=1e-12)


def test_adam_clips_and_refuses_nonfinite():
    p = torch.nn.Parameter(torch.zeros(3))
    store = ParameterStore({"p": p})
    st = adam_cosine_step(store, grads={"p": torch.tensor([30.0, 40.0, 0.0])}, schedule=Schedule(1.0, 0, 10))
    assert st["grad_norm"] == pytest.approx(50.0)
    with pytest.raises(FloatingPointError):
        adam_cosine_step(store, grads={"p": torch.tensor([math.nan, 0, 0])}, schedule=Schedule(1.0, 0, 10))
    st = adam_cosine_step(store, grads={"p": torch.tensor([math.inf, 0, 0])}, schedule=Schedule(1.0, 0, 10),
                          checked=False)
    assert st["skipped"] and store.step == 1


def test_store_state_roundtrip():
    a = ParameterStore({"w": torch.nn.Parameter(torch.randn(2, 2))})
    a.exp_avg["w"].fill_(0.5)
    a.step = 7
    b = ParameterStore({"w": torch.nn.Parameter(torch.zeros(2, 2))})
    b.load_state_dict(a.state_dict())
    assert b.step == 7 and torch.equal(b["w"], a["w"]) and torch.equal(b.exp_avg["w"], a.exp_avg["w"])
    c = ParameterStore({"w": torch.nn.Parameter(torch.zeros(3))})
    with pytest.raises(ValueError):
        c.load_state_dict(a.state_dict())
