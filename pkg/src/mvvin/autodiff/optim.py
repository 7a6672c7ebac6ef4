"""SGD and Adam updates over :class:`ParamSet` values."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from mvvin.autodiff.params import ParamSet
from mvvin.autodiff.tensor import Tensor
from mvvin.errors import ArgumentError, ShapeError


def _check(params: ParamSet, grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        if name not in grads:
            raise ShapeError(f"missing gradient for parameter {name!r}")
        if np.shape(grads[name]) != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {np.shape(grads[name])}, parameter has {p.shape}")


def sgd_update(params: ParamSet, grads: Mapping[str, np.ndarray], lr: float) -> ParamSet:
    """Return ``theta - lr * g`` as a new parameter set; ``params`` is untouched."""
    if lr < 0:
        raise ArgumentError(f"learning rate must be >= 0, got {lr}")
    _check(params, grads)
    return ParamSet(
        {name: Tensor(p.data - lr * np.asarray(grads[name]), requires_grad=p.requires_grad) for name, p in params.items()}
    )


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(
    params: ParamSet,
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[ParamSet, AdamState]:
    """One bias-corrected Adam step. Returns new parameters and new state."""
    if not (0 <= beta1 < 1 and 0 <= beta2 < 1):
        raise ArgumentError(f"Adam betas must lie in [0, 1), got {(beta1, beta2)}")
    if eps <= 0:
        raise ArgumentError(f"Adam eps must be > 0, got {eps}")
    _check(params, grads)
    t = state.step + 1
    new = AdamState(step=t)
    out = ParamSet()
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = np.asarray(grads[name])
        m = beta1 * state.m.get(name, np.zeros_like(p.data)) + (1.0 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(p.data)) + (1.0 - beta2) * g * g
        new.m[name], new.v[name] = m, v
        out[name] = Tensor(p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps), requires_grad=p.requires_grad)
    return out, new


class Adam:
    """Stateful wrapper around :func:`adam_update`."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params: ParamSet, grads: Mapping[str, np.ndarray]) -> ParamSet:
        out, self.state = adam_update(params, grads, self.state, self.lr, self.beta1, self.beta2, self.eps)
        return out
