"""Named parameter collections and initialisers."""

from __future__ import annotations

import math
from typing import Callable, Iterator, Mapping

import numpy as np

from mvvin.autodiff.tensor import DTYPE, Tensor
from mvvin.errors import ArgumentError, ShapeError


class ParamSet:
    """Ordered name -> Tensor map with a stable iteration order.

    Insertion order is the iteration order; it is what flattening, optimizer
    state and checkpoints rely on.
    """

    def __init__(self, items: Mapping[str, Tensor] | None = None):
        self._items: dict[str, Tensor] = {}
        for name, value in (items or {}).items():
            self[name] = value

    def __setitem__(self, name: str, value) -> None:
        if name in self._items:
            raise ArgumentError(f"duplicate parameter name {name!r}")
        self._items[name] = value if isinstance(value, Tensor) else Tensor(value)

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def items(self):
        return self._items.items()

    def values(self):
        return self._items.values()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._items.items()}

    @property
    def num_params(self) -> int:
        return sum(v.data.size for v in self._items.values())

    def subset(self, prefix: str) -> "ParamSet":
        """Parameters under ``prefix.`` with the prefix stripped (same Tensor objects)."""
        cut = len(prefix) + 1
        return ParamSet({k[cut:]: v for k, v in self._items.items() if k.startswith(prefix + ".")})

    def copy(self, requires_grad: bool | None = None) -> "ParamSet":
        """Deep copy as fresh leaves."""
        return ParamSet(
            {
                k: Tensor(v.data.copy(), requires_grad=v.requires_grad if requires_grad is None else requires_grad)
                for k, v in self._items.items()
            }
        )

    def map(self, fn: Callable[[str, Tensor], Tensor]) -> "ParamSet":
        return ParamSet({k: fn(k, v) for k, v in self._items.items()})

    def zero_grad(self) -> None:
        for v in self._items.values():
            v.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        """Current gradients, zeros for parameters the loss never reached."""
        return {k: (v.grad if v.grad is not None else np.zeros_like(v.data)) for k, v in self._items.items()}

    def flatten(self) -> np.ndarray:
        if not self._items:
            return np.zeros(0)
        return np.concatenate([v.data.reshape(-1) for v in self._items.values()])

    def unflatten(self, flat: np.ndarray, requires_grad: bool = False) -> "ParamSet":
        flat = np.asarray(flat, dtype=DTYPE)
        if flat.size != self.num_params:
            raise ShapeError(f"flat vector has {flat.size} entries, parameter set needs {self.num_params}")
        out, pos = ParamSet(), 0
        for k, v in self._items.items():
            n = v.data.size
            out[k] = Tensor(flat[pos : pos + n].reshape(v.shape).copy(), requires_grad=requires_grad)
            pos += n
        return out

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: v.shape for k, v in self._items.items()}

    def bit_equal(self, other: "ParamSet") -> bool:
        if self.names() != other.names():
            return False
        return all(
            a.data.shape == b.data.shape and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.values(), other.values())
        )


def flatten_grads(grads: Mapping[str, np.ndarray], order) -> np.ndarray:
    return np.concatenate([np.asarray(grads[k]).reshape(-1) for k in order])


def he_scaled_init(shape, fan_in: int, rng_seed, gain: float = math.sqrt(2.0)) -> Tensor:
    """Zero-mean normal weights with std ``gain / sqrt(fan_in)``.

    The default gain of sqrt(2) is the usual correction for ReLU layers.
    """
    if fan_in < 1:
        raise ArgumentError(f"fan_in must be >= 1, got {fan_in}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    std = gain / math.sqrt(fan_in)
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=True)
