"""Reverse-mode automatic differentiation over numpy arrays."""

from mvvin.autodiff import ops
from mvvin.autodiff.gradcheck import analytic_grad, grad_check, numeric_grad
from mvvin.autodiff.ops import (
    conv2d_apply,
    linear_apply,
    lstm_cell_apply,
    relu_apply,
    softmax_apply,
)
from mvvin.autodiff.optim import Adam, AdamState, adam_update, sgd_update
from mvvin.autodiff.params import ParamSet, he_scaled_init
from mvvin.autodiff.tensor import Tape, Tensor, backward_pass, enable_grad, grad_enabled, no_grad

__all__ = [
    "Adam",
    "AdamState",
    "ParamSet",
    "Tape",
    "Tensor",
    "adam_update",
    "analytic_grad",
    "backward_pass",
    "conv2d_apply",
    "grad_check",
    "enable_grad",
    "grad_enabled",
    "he_scaled_init",
    "linear_apply",
    "lstm_cell_apply",
    "no_grad",
    "numeric_grad",
    "ops",
    "relu_apply",
    "sgd_update",
    "softmax_apply",
]
