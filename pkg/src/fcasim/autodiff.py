"""Tape-style reverse-mode autodiff over dense float64 arrays.

Just enough to train small MLPs with the losses in :mod:`fcasim.losses`.
Every op records a node carrying a monotonically increasing id; ``backward``
walks the nodes reachable from the loss in decreasing id order, which is the
reverse of the order they were appended to the tape.
"""
from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

_node_ids = itertools.count()


class DimensionError(ValueError):
    pass


class DomainError(ValueError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient buffer.

    Leaves are created with ``requires_grad=True``; intermediate tensors carry
    the parents and a backward closure that maps the output gradient to one
    gradient per parent (``None`` where nothing flows).
    """

    __slots__ = ("values", "grad", "requires_grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.array(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.node_id: Optional[int] = next(_node_ids) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Optional[Callable] = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    # operator sugar
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.values = values
    out.grad = None
    out.op = op
    tracked = any(p.requires_grad for p in parents)
    out.requires_grad = tracked
    if tracked:
        out.node_id = next(_node_ids)
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.node_id = None
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> bool:
    """Return True when ``b`` is a bias row broadcast over the rows of ``a``."""
    if a.shape == b.shape:
        return False
    if a.values.ndim == 2 and b.values.ndim == 1 and b.shape[0] == a.shape[1]:
        return True
    if a.values.ndim == 2 and b.values.ndim == 2 and b.shape == (1, a.shape[1]):
        return True
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    _check_same(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b),
                 lambda g: (g, _unbroadcast(g, sb)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    _check_same(a, b, "sub")
    sb = b.shape
    return _make(a.values - b.values, (a, b),
                 lambda g: (g, -_unbroadcast(g, sb)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    b = _as_tensor(b)
    _check_same(a, b, "mul")
    av, bv, sb = a.values, b.values, b.shape
    return _make(av * bv, (a, b),
                 lambda g: (g * bv, _unbroadcast(g * av, sb)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.values * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g), "matmul")


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0  # subgradient at exactly 0 is 0; NaN passes through
    return _make(np.maximum(a.values, 0.0), (a,), lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.values)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def ln(a: Tensor) -> Tensor:
    if np.any(a.values <= 0):
        raise DomainError("ln: input must be strictly positive")
    av = a.values
    return _make(np.log(av), (a,), lambda g: (g / av,), "ln")


def power(a: Tensor, p: float) -> Tensor:
    """Elementwise ``a ** p`` for a constant exponent; requires ``a >= 0`` unless ``p`` is integral."""
    av = a.values
    if p == 0:
        return _make(np.ones_like(av), (a,), lambda g: (np.zeros_like(g),), "power")
    out = av ** p
    return _make(out, (a,), lambda g: (g * p * av ** (p - 1),), "power")


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    return _make(np.array(a.values.sum()), (a,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(a: Tensor) -> Tensor:
    return scale(sum(a), 1.0 / a.values.size)


def row_sum(a: Tensor) -> Tensor:
    """Sum each row of a 2-D tensor, giving shape ``(batch,)``."""
    n_cols = a.shape[1]
    return _make(a.values.sum(axis=1), (a,),
                 lambda g: (np.repeat(g[:, None], n_cols, axis=1),), "row_sum")


def log_softmax(logits: Tensor) -> Tensor:
    z = logits.values
    if z.ndim != 2 or z.shape[1] < 2:
        raise DimensionError(f"log_softmax expects batch x C with C >= 2, got {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _make(out, (logits,),
                 lambda g: (g - probs * g.sum(axis=1, keepdims=True),), "log_softmax")


def softmax(logits: Tensor) -> Tensor:
    return exp(log_softmax(logits))


def pick(a: Tensor, index: np.ndarray) -> Tensor:
    """Select ``a[i, index[i]]`` for every row, giving shape ``(batch,)``."""
    index = np.asarray(index, dtype=np.int64)
    rows = np.arange(a.shape[0])
    shape = a.shape

    def backward(g):
        out = np.zeros(shape)
        out[rows, index] = g
        return (out,)

    return _make(a.values[rows, index], (a,), backward, "pick")


def stop_gradient(t: Tensor) -> Tensor:
    """Pass values forward unchanged; send no gradient back along this edge."""
    return _make(t.values, (t,), lambda g: (None,), "stop_gradient")


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires-grad leaf in the graph.

    Leaves reached only through a stop-gradient edge end up with a zero
    gradient. Gradients accumulate across calls; call :func:`zero_grads`
    between steps.
    """
    if loss.values.size != 1 or loss.values.ndim > 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("loss does not depend on any tensor that requires grad")

    nodes: dict[int, Tensor] = {}
    stack = [loss]
    while stack:
        t = stack.pop()
        if t.node_id in nodes:
            continue
        nodes[t.node_id] = t
        stack.extend(p for p in t._parents if p.requires_grad)

    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.values)}
    for nid in sorted(nodes, reverse=True):
        t = nodes[nid]
        g = grads.pop(nid, None)
        if t._backward is None:
            if g is None:
                g = np.zeros_like(t.values)
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        if g is None:
            continue
        for parent, pg in zip(t._parents, t._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = parent.node_id
            grads[pid] = pg if pid not in grads else grads[pid] + pg


def zero_grads(params: Sequence[Tensor]) -> None:
    for p in params:
        p.grad = None
