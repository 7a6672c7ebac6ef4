"""Central-difference gradient oracle."""

from __future__ import annotations

from typing import Callable

import numpy as np

from mvvin.autodiff.params import ParamSet
from mvvin.autodiff.tensor import Tensor, backward_pass, no_grad
from mvvin.errors import NumericError


def numeric_grad(f: Callable[[ParamSet], Tensor], params: ParamSet, h: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``f`` w.r.t. every entry of ``params``."""
    out = {}
    with no_grad():
        for name, p in params.items():
            g = np.zeros_like(p.data)
            flat = p.data.reshape(-1)
            gflat = g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = _value(f, params)
                flat[i] = orig - h
                fm = _value(f, params)
                flat[i] = orig
                gflat[i] = (fp - fm) / (2.0 * h)
            out[name] = g
    return out


def _value(f, params) -> float:
    v = f(params).item()
    if not np.isfinite(v):
        raise NumericError(f"objective is not finite: {v}")
    return v


def analytic_grad(f: Callable[[ParamSet], Tensor], params: ParamSet) -> dict[str, np.ndarray]:
    leaves = ParamSet({k: Tensor(v.data, requires_grad=True) for k, v in params.items()})
    loss = f(leaves)
    if not np.isfinite(loss.item()):
        raise NumericError(f"objective is not finite: {loss.item()}")
    backward_pass(loss)
    return leaves.grads()


def grad_check(f: Callable[[ParamSet], Tensor], params: ParamSet, h: float = 1e-5) -> float:
    """Max over entries of ``|autodiff - fd| / max(1, |fd|)``."""
    ana = analytic_grad(f, params)
    num = numeric_grad(f, params, h)
    worst = 0.0
    for name in params:
        err = np.abs(ana[name] - num[name]) / np.maximum(1.0, np.abs(num[name]))
        if err.size:
            worst = max(worst, float(err.max()))
    return worst
