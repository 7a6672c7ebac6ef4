"""Tensor values and the define-by-run tape used for reverse-mode differentiation.

Every op output remembers its parents and a closure mapping the output
gradient to parent gradients. A :class:`Tape` is the creation-ordered list of
those nodes reachable from a loss; creation order is a valid topological
order, so a reverse sweep over it is a correct backward pass. Ordering by
creation also fixes the floating-point accumulation order, which keeps
backward passes bit-reproducible.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from mvvin.errors import ArgumentError

DTYPE = np.float64

_ids = itertools.count()
_state = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextmanager
def enable_grad():
    """Re-enable graph recording, e.g. for an inner gradient inside a no-grad rollout."""
    prev = grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """An n-dimensional float array that can take part in the tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._id = next(_ids)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ArgumentError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # arithmetic sugar; the ops module holds the definitions
    def __add__(self, other):
        from mvvin.autodiff import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from mvvin.autodiff import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from mvvin.autodiff import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from mvvin.autodiff import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from mvvin.autodiff import ops

        return ops.mul(self, -1.0)

    def __matmul__(self, other):
        from mvvin.autodiff import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from mvvin.autodiff import ops

        return ops.index(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data: np.ndarray, parents: Iterable[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap an op result, recording it on the tape when any parent needs grad."""
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class Tape:
    """Creation-ordered list of recorded op outputs reachable from a root."""

    def __init__(self, entries: list[Tensor]):
        self.entries = entries

    @classmethod
    def from_loss(cls, loss: Tensor) -> "Tape":
        seen: set[int] = set()
        nodes: list[Tensor] = []
        stack = [loss]
        while stack:
            t = stack.pop()
            if t._id in seen or t._backward is None:
                continue
            seen.add(t._id)
            nodes.append(t)
            stack.extend(t._parents)
        nodes.sort(key=lambda t: t._id)
        return cls(nodes)

    def __len__(self) -> int:
        return len(self.entries)


def backward_pass(loss: Tensor, tape: Tape | None = None, capture: Sequence[Tensor] = ()) -> dict[int, np.ndarray]:
    """Populate ``.grad`` on every requires-grad leaf reachable from ``loss``.

    Leaf gradients accumulate into any existing ``.grad``. Returns the total
    gradient that reached each tensor in ``capture`` (zeros when unreached),
    keyed by tensor id.
    """
    if loss.data.size != 1:
        raise ArgumentError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else Tape.from_loss(loss)
    want = {t._id for t in capture}
    captured: dict[int, np.ndarray] = {}
    if loss.is_leaf:
        if loss.requires_grad:
            _accumulate_leaf(loss, np.ones_like(loss.data))
        return {t._id: (np.ones_like(t.data) if t is loss else np.zeros_like(t.data)) for t in capture}
    pending: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(tape.entries):
        g = pending.pop(node._id, None)
        if g is None:
            continue
        if node._id in want:
            captured[node._id] = g
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                _accumulate_leaf(parent, pg)
                if parent._id in want:
                    captured[parent._id] = parent.grad
            else:
                prev = pending.get(parent._id)
                pending[parent._id] = pg if prev is None else prev + pg
    for t in capture:
        captured.setdefault(t._id, np.zeros_like(t.data))
    return captured


def _accumulate_leaf(leaf: Tensor, g: np.ndarray) -> None:
    if leaf.grad is None:
        leaf.grad = np.array(g, dtype=DTYPE, copy=True).reshape(leaf.data.shape)
    else:
        leaf.grad = leaf.grad + g
