"""Central finite-difference check of reverse-mode gradients."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import torch


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    max_abs_err: float
    n_checked: int
    worst_index: int = -1


@dataclass
class GradCheckReport:
    params: dict[str, ParamCheck] = field(default_factory=dict)
    tol: float = 1e-6

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params.values()), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def summary(self) -> str:
        lines = [f"{p.name}: rel={p.max_rel_err:.3e} abs={p.max_abs_err:.3e} n={p.n_checked}"
                 for p in self.params.values()]
        return "\n".join(lines)


def rel_err(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def _as_mapping(inputs) -> Mapping[str, torch.Tensor]:
    if hasattr(inputs, "params"):
        return inputs.params
    if isinstance(inputs, torch.Tensor):
        return {"x": inputs}
    return inputs


def gradient_check(
    f: Callable[[], torch.Tensor],
    inputs,
    step: float = 1e-5,
    tol: float = 1e-6,
    entries: Mapping[str, list[int]] | None = None,
) -> GradCheckReport:
    """Compare autograd gradients of scalar ``f()`` with central differences.

    ``inputs`` is a ParameterStore, a name->tensor mapping or a single tensor;
    ``f`` must read the current values of those tensors on every call.
    ``entries`` restricts the check to given flat indices per parameter.
    """
    params = _as_mapping(inputs)
    names = list(params)
    tensors = [params[n] for n in names]
    loss = f()
    if not torch.isfinite(loss):
        raise NonFiniteError("loss is not finite at the base point")
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    report = GradCheckReport(tol=tol)
    for name, t, g in zip(names, tensors, grads):
        analytic = torch.zeros_like(t) if g is None else g.detach()
        idxs = range(t.numel()) if entries is None else entries.get(name, [])
        flat = t.data.view(-1)
        a_flat = analytic.reshape(-1)
        worst, worst_i, worst_abs, count = 0.0, -1, 0.0, 0
        for i in idxs:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss when perturbing {name}[{i}]")
            num = (fp - fm) / (2 * step)
            a = a_flat[i].item()
            e = rel_err(a, num)
            worst_abs = max(worst_abs, abs(a - num))
            if e > worst or worst_i < 0:
                worst, worst_i = max(e, worst), i
            count += 1
        report.params[name] = ParamCheck(name, worst, worst_abs, count, worst_i)
    return report


def random_entries(inputs, n: int, seed: int = 0) -> dict[str, list[int]]:
    """Pick ``n`` scalar entries uniformly over all parameters."""
    params = _as_mapping(inputs)
    names = list(params)
    sizes = np.array([params[k].numel() for k in names])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    out: dict[str, list[int]] = {}
    for k in np.sort(flat):
        j = int(np.searchsorted(offsets, k, side="right") - 1)
        out.setdefault(names[j], []).append(int(k - offsets[j]))
    return out
