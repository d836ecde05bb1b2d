"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable operation is registered through :func:`record`, which
computes nothing itself: the caller supplies the forward value and a closure
mapping the upstream gradient to one gradient per parent. The tape stores the
calls in execution order and :meth:`Tape.backward` replays them in reverse.

A tape is bound to the current thread, so independent workers never share
gradient state.
"""
from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf."""


class GradientError(RuntimeError):
    """Misuse of the tape (double backward, non-scalar loss, ...)."""


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out: "Tensor", parents: tuple["Tensor", ...], backward: BackwardFn):
        self.out = out
        self.parents = parents
        self.backward = backward


class Tensor:
    """A row-major float64 array that can take part in differentiation.

    ``grad`` is allocated (zeros) the first time the tensor is used by a
    recorded operation, and always has the tensor's shape.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_node", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.ndim == 0:
            arr = arr.reshape(())
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite value in tensor {name or ''}".strip())
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._node: _Node | None = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.name = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operators are attached in lcm.core.ops to keep this module free of op logic
    def __len__(self) -> int:
        return self.shape[0]


def _raise_not_scalar(t: Tensor) -> float:
    raise GradientError(f"tensor of shape {t.shape} is not a scalar")


class Tape:
    """Execution-ordered record of operations for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[_Node] = []
        self.leaves: dict[int, Tensor] = {}
        self.enabled = True
        self._consumed = False

    def __len__(self) -> int:
        return len(self.nodes)

    def push(self, out: Tensor, parents: tuple[Tensor, ...], backward: BackwardFn) -> None:
        for p in parents:
            if p.requires_grad and p._node is None:
                self.leaves.setdefault(id(p), p)
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
        node = _Node(out, parents, backward)
        out._node = node
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise GradientError("backward already ran on this tape; call clear() first")
        if loss.size != 1:
            raise GradientError(f"loss must be a scalar, got shape {loss.shape}")
        if not self.nodes:
            raise GradientError("tape is empty")
        self._consumed = True
        if loss._node is None:
            if loss.requires_grad:
                loss.grad = loss.grad + 1.0
            return
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for parent, pg in zip(node.parents, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"gradient shape {pg.shape} does not match tensor {parent.shape}")
                if parent._node is None:
                    parent.grad += pg
                else:
                    key = id(parent)
                    prev = pending.get(key)
                    pending[key] = pg if prev is None else prev + pg

    def clear(self) -> None:
        """Drop recorded nodes and reset every seen leaf's gradient to zero."""
        for node in self.nodes:
            node.out._node = None
        for leaf in self.leaves.values():
            leaf.grad = np.zeros_like(leaf.data)
        self.nodes = []
        self.leaves = {}
        self._consumed = False


_local = threading.local()


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


@contextmanager
def no_grad() -> Iterator[None]:
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap a forward value and register its backward rule on the tape.

    ``backward`` receives the gradient of the output and must return one
    array (or None) per parent, each shaped like that parent.
    """
    data = np.ascontiguousarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError("operation produced a non-finite value")
    tape = current_tape()
    needs = tape.enabled and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, needs)
    if needs:
        tape.push(out, tuple(parents), backward)
    return out


def backward(loss: Tensor) -> None:
    current_tape().backward(loss)


def clear_tape() -> None:
    current_tape().clear()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)
