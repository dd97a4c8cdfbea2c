"""Parameter-holding building blocks over the op catalog.

Weights are drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases start at zero.
Every module records how each parameter was initialised in ``init_specs`` so a
ParameterStore can carry it.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from . import ops
from .ops import DEFAULT_DTYPE


def _uniform(shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return (torch.rand(*shape, dtype=dtype) * 2 - 1) * bound


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int, bias: bool = True, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = nn.Parameter(_uniform((d_out, d_in), d_in, dtype))
        self.bias = nn.Parameter(torch.zeros(d_out, dtype=dtype)) if bias else None

    def forward(self, x):
        return ops.linear(x, self.weight, self.bias)

    def zero_(self):
        with torch.no_grad():
            self.weight.zero_()
            if self.bias is not None:
                self.bias.zero_()
        return self


class Conv2d(nn.Module):
    """NCHW convolution with square kernel."""

    def __init__(self, c_in: int, c_out: int, k: int = 3, stride: int = 1, padding="same", dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = nn.Parameter(_uniform((c_out, c_in, k, k), c_in * k * k, dtype))
        self.bias = nn.Parameter(torch.zeros(c_out, dtype=dtype))
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)

    def zero_(self):
        with torch.no_grad():
            self.weight.zero_()
            self.bias.zero_()
        return self


class LayerNorm(nn.Module):
    def __init__(self, d: int, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(d, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(d, dtype=dtype))

    def forward(self, x):
        return ops.layer_norm(x, self.weight, self.bias)


def init_specs(module: nn.Module) -> dict[str, str]:
    """Name -> init description for every parameter of ``module``."""
    out = {}
    for name, _ in module.named_parameters():
        leaf = name.rsplit(".", 1)[-1]
        owner = module.get_submodule(name.rsplit(".", 1)[0]) if "." in name else module
        if isinstance(owner, LayerNorm):
            out[name] = "ones" if leaf == "weight" else "zeros"
        elif leaf == "bias":
            out[name] = "zeros"
        elif leaf == "weight":
            out[name] = "uniform_fan_in"
        else:
            out[name] = getattr(module, "extra_init_specs", {}).get(name, "custom")
    return out
