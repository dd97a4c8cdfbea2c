"""Named parameter storage and the AdamW + warmup/cosine update."""
from __future__ import annotations

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass

import torch
from torch import nn

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 1e-4
    warmup_steps: int = 1000
    total_steps: int = 100_000


def lr_factor(t: int, warmup_steps: int, total_steps: int | float) -> float:
    """Multiplier for the ``t``-th update (1-based): linear ramp, then half cosine."""
    if warmup_steps > 0 and t < warmup_steps:
        return t / warmup_steps
    if math.isinf(total_steps):
        return 1.0
    span = max(total_steps - warmup_steps, 1)
    progress = min(max((t - warmup_steps) / span, 0.0), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * progress))


class ParameterStore:
    """Ordered name -> tensor map plus Adam moments and the step counter."""

    def __init__(self, params: "OrderedDict[str, torch.Tensor]", init_specs: dict[str, str] | None = None):
        self.params = OrderedDict(params)
        self.init_specs = dict(init_specs or {})
        self.exp_avg = OrderedDict((k, torch.zeros_like(v)) for k, v in self.params.items())
        self.exp_avg_sq = OrderedDict((k, torch.zeros_like(v)) for k, v in self.params.items())
        self.step = 0

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParameterStore":
        params = OrderedDict((k, p) for k, p in module.named_parameters())
        specs = getattr(module, "init_specs", {})
        return cls(params, {k: specs.get(k, "uniform_fan_in") for k in params})

    def __len__(self):
        return len(self.params)

    def __iter__(self):
        return iter(self.params)

    def __getitem__(self, name):
        return self.params[name]

    def grads(self) -> "OrderedDict[str, torch.Tensor]":
        return OrderedDict((k, p.grad if p.grad is not None else torch.zeros_like(p))
                           for k, p in self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_scalars(self) -> int:
        return sum(p.numel() for p in self.params.values())

    def norm_table(self) -> dict[str, float]:
        return {k: float(p.detach().norm()) for k, p in self.params.items()}

    def state_dict(self) -> dict:
        return {
            "step": self.step,
            "params": OrderedDict((k, v.detach().clone()) for k, v in self.params.items()),
            "exp_avg": OrderedDict((k, v.clone()) for k, v in self.exp_avg.items()),
            "exp_avg_sq": OrderedDict((k, v.clone()) for k, v in self.exp_avg_sq.items()),
        }

    def load_state_dict(self, state: dict):
        missing = set(self.params) ^ set(state["params"])
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)[:5]}")
        with torch.no_grad():
            for k, p in self.params.items():
                src = state["params"][k]
                if tuple(src.shape) != tuple(p.shape):
                    raise ValueError(f"shape mismatch for {k}: {tuple(src.shape)} vs {tuple(p.shape)}")
                p.copy_(src)
                self.exp_avg[k].copy_(state["exp_avg"][k])
                self.exp_avg_sq[k].copy_(state["exp_avg_sq"][k])
        self.step = int(state["step"])


def adam_cosine_step(
    store: ParameterStore,
    grads=None,
    schedule: Schedule = Schedule(),
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    clip_norm: float | None = 1.0,
    checked: bool = True,
) -> dict:
    """One decoupled-weight-decay Adam update with global-norm clipping.

    Returns a small stats dict (``lr``, ``grad_norm``, ``skipped``).
    """
    if store.step >= schedule.total_steps:
        raise ValueError(f"step {store.step} is past total_steps={schedule.total_steps}")
    grads = store.grads() if grads is None else grads
    gsq = sum(float((g.double() ** 2).sum()) for g in grads.values())
    gnorm = math.sqrt(gsq)
    if not math.isfinite(gnorm):
        bad = [k for k, g in grads.items() if not torch.isfinite(g).all()]
        if checked:
            raise FloatingPointError(f"non-finite gradients in {bad[:5]}")
        log.warning("skipping update: non-finite gradients in %s", bad[:5])
        return {"lr": 0.0, "grad_norm": gnorm, "skipped": True}
    scale = 1.0
    if clip_norm is not None and gnorm > clip_norm:
        scale = clip_norm / (gnorm + 1e-6)
    t = store.step + 1
    lr = schedule.base_lr * lr_factor(t, schedule.warmup_steps, schedule.total_steps)
    b1, b2 = betas
    bc1 = 1 - b1 ** t
    bc2 = 1 - b2 ** t
    with torch.no_grad():
        for k, p in store.params.items():
            g = grads[k] * scale if scale != 1.0 else grads[k]
            m, v = store.exp_avg[k], store.exp_avg_sq[k]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            if weight_decay:
                p.mul_(1 - lr * weight_decay)
            denom = (v / bc2).sqrt_().add_(eps)
            p.addcdiv_(m, denom, value=-lr / bc1)
    store.step = t
    return {"lr": lr, "grad_norm": gnorm, "skipped": False}
