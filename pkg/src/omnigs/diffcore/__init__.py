"""Reverse-mode differentiable substrate: op catalog, gradient checking, optimizer."""
from . import ops
from .gradcheck import GradCheckReport, NonFiniteError, gradient_check, random_entries, rel_err
from .ops import DEFAULT_DTYPE, bilinear_sample_2d, scatter_mean
from .optim import ParameterStore, Schedule, adam_cosine_step, lr_factor

__all__ = [
    "ops", "DEFAULT_DTYPE", "bilinear_sample_2d", "scatter_mean",
    "GradCheckReport", "NonFiniteError", "gradient_check", "random_entries", "rel_err",
    "ParameterStore", "Schedule", "adam_cosine_step", "lr_factor",
]
