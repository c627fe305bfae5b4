"""Dense 2-D tensors with reverse-mode differentiation.

Every operation that touches a tensor requiring gradients records its
parents and a backward rule on the output.  ``backward`` walks that record
in reverse topological order (the *tape*) and accumulates gradients into
the ``grad`` buffer of every leaf tensor created with ``requires_grad``.

Only scalar broadcasting is supported: a 1x1 tensor or a Python float may
be combined elementwise with a tensor of any shape.  Everything is float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

EPS = 1e-12

_state = threading.local()


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """An operation was called outside its documented preconditions."""


class NonFiniteError(FloatingPointError):
    """A forward operation produced NaN or Inf."""


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    """Disable tape recording on the current thread."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"expected a 2-D array, got {arr.ndim}-D")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- construction helpers -------------------------------------------------
    @classmethod
    def _from_op(cls, out: np.ndarray, parents, backward, op: str) -> "Tensor":
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"non-finite values produced by {op}")
        t = cls.__new__(cls)
        t.data = out
        t.grad = None
        t.op = op
        t.requires_grad = _grad_enabled() and any(p.requires_grad for p in parents)
        if t.requires_grad:
            t._parents = tuple(parents)
            t._backward = backward
        else:
            t._parents = ()
            t._backward = None
        return t

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on a {self.shape} tensor")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data.tolist()}{flag})"

    # -- operators ------------------------------------------------------------
    def __add__(self, other):
        return elementwise(self, other, "add")

    def __radd__(self, other):
        return elementwise(self, other, "add")

    def __sub__(self, other):
        return elementwise(self, other, "sub")

    def __rsub__(self, other):
        return elementwise(self, other, "sub") * -1.0

    def __mul__(self, other):
        return elementwise(self, other, "mul")

    def __rmul__(self, other):
        return elementwise(self, other, "mul")

    def __truediv__(self, other):
        return elementwise(self, other, "div")

    def __neg__(self):
        return elementwise(self, -1.0, "scale")

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    if grad.shape == shape:
        return grad
    # scalar broadcast is the only kind allowed
    return np.array([[grad.sum()]])


# -- linear algebra -------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.cols != b.rows:
        raise DimensionError(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), bw, "matmul")


def transpose(a: Tensor) -> Tensor:
    return Tensor._from_op(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def elementwise(a: Tensor, b, kind: str) -> Tensor:
    """Pointwise add, sub, mul, div, or scale (multiply by a Python float).

    ``b`` may be a tensor of identical shape, a 1x1 tensor, or a float.
    """
    a = as_tensor(a)
    if kind == "scale":
        c = float(b)
        return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,), "scale")
    b = as_tensor(b)
    if a.shape != b.shape and b.shape != (1, 1) and a.shape != (1, 1):
        raise DimensionError(f"elementwise {kind} {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    sa, sb = a.shape, b.shape
    if kind == "add":
        out = ad + bd

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(g, sb)

    elif kind == "sub":
        out = ad - bd

        def bw(g):
            return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    elif kind == "mul":
        out = ad * bd

        def bw(g):
            return _unbroadcast(g * bd, sa), _unbroadcast(g * ad, sb)

    elif kind == "div":
        out = ad / bd

        def bw(g):
            return _unbroadcast(g / bd, sa), _unbroadcast(-g * ad / (bd * bd), sb)

    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return Tensor._from_op(out, (a, b), bw, kind)


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    out = ad**exponent
    return Tensor._from_op(
        out, (a,), lambda g: (g * exponent * ad ** (exponent - 1.0),), "power"
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1 x n row vector to every row of an m x n tensor."""
    if b.rows != 1 or b.cols != x.cols:
        raise DimensionError(f"bias {b.shape} for input {x.shape}")
    return Tensor._from_op(
        x.data + b.data,
        (x, b),
        lambda g: (g, g.sum(axis=0, keepdims=True)),
        "add_bias",
    )


def scale_rows(x: Tensor, s: Tensor) -> Tensor:
    """Multiply row i of ``x`` by ``s[i, 0]``."""
    if s.shape != (x.rows, 1):
        raise DimensionError(f"row scales {s.shape} for input {x.shape}")
    xd, sd = x.data, s.data
    return Tensor._from_op(
        xd * sd,
        (x, s),
        lambda g: (g * sd, (g * xd).sum(axis=1, keepdims=True)),
        "scale_rows",
    )


def gather_rows(x: Tensor, idx: Sequence[int]) -> Tensor:
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)
        return (full,)

    return Tensor._from_op(x.data[idx].copy(), (x,), bw, "gather_rows")


def submatrix(x: Tensor, idx: Sequence[int]) -> Tensor:
    """``x[idx][:, idx]`` for a square tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    shape = x.shape
    sel = np.ix_(idx, idx)

    def bw(g):
        full = np.zeros(shape)
        np.add.at(full, sel, g)
        return (full,)

    return Tensor._from_op(x.data[sel].copy(), (x,), bw, "submatrix")


def pick(x: Tensor, i: int, j: int) -> Tensor:
    shape = x.shape

    def bw(g):
        full = np.zeros(shape)
        full[i, j] = g[0, 0]
        return (full,)

    return Tensor._from_op(x.data[i : i + 1, j : j + 1].copy(), (x,), bw, "pick")


# -- nonlinearities -------------------------------------------------------------


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        mask = x.data > 0
        return Tensor._from_op(x.data * mask, (x,), lambda g: (g * mask,), "relu")
    if kind == "tanh":
        out = np.tanh(x.data)
        return Tensor._from_op(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")
    if kind in ("none", "identity", None):
        return x
    raise ValueError(f"unknown activation {kind!r}")


def relu(x: Tensor) -> Tensor:
    return activation(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return activation(x, "tanh")


def softmax_rows(x: Tensor) -> Tensor:
    if x.cols < 1:
        raise DimensionError("softmax over zero columns")
    z = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    out = z / z.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(out, (x,), bw, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=1, keepdims=True),)

    return Tensor._from_op(out, (x,), bw, "log_softmax_rows")


def row_l2_normalize(x: Tensor, eps: float = EPS) -> Tensor:
    """Divide each row by max(eps, its Euclidean norm)."""
    if eps <= 0:
        raise ContractError("eps must be positive")
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=1, keepdims=True))
    active = norms > eps
    denom = np.where(active, norms, eps)
    out = xd / denom

    def bw(g):
        # d(x/|x|) = (g - y (y.g)) / |x| on rows above the guard, g/eps below it
        proj = (g * out).sum(axis=1, keepdims=True)
        return (np.where(active, (g - out * proj) / denom, g / eps),)

    return Tensor._from_op(out, (x,), bw, "row_l2_normalize")


# -- reductions -----------------------------------------------------------------


def reduce(x: Tensor, kind: str, eps: float = EPS) -> Tensor:
    """Reduce to a 1x1 tensor: sum, mean, frobenius_norm or row_entropy_mean."""
    xd = x.data
    if kind == "sum":
        return Tensor._from_op(
            np.array([[xd.sum()]]), (x,), lambda g: (np.full(xd.shape, g[0, 0]),), "sum"
        )
    if kind == "mean":
        n = xd.size
        return Tensor._from_op(
            np.array([[xd.mean()]]),
            (x,),
            lambda g: (np.full(xd.shape, g[0, 0] / n),),
            "mean",
        )
    if kind == "frobenius_norm":
        norm = float(np.sqrt((xd * xd).sum()))

        def bw(g):
            if norm <= eps:
                return (np.zeros_like(xd),)
            return (g[0, 0] * xd / norm,)

        return Tensor._from_op(np.array([[norm]]), (x,), bw, "frobenius_norm")
    if kind == "row_entropy_mean":
        if np.any(xd < -1e-12) or np.any(np.abs(xd.sum(axis=1) - 1.0) > 1e-6):
            raise ContractError("row_entropy_mean requires probability rows")
        m = xd.shape[0]
        logs = np.log(xd + eps)
        value = -(xd * logs).sum() / m

        def bw(g):
            return (-g[0, 0] * (logs + xd / (xd + eps)) / m,)

        return Tensor._from_op(np.array([[value]]), (x,), bw, "row_entropy_mean")
    raise ValueError(f"unknown reduction {kind!r}")


def tsum(x: Tensor) -> Tensor:
    return reduce(x, "sum")


def mean(x: Tensor) -> Tensor:
    return reduce(x, "mean")


def frobenius_norm(x: Tensor) -> Tensor:
    return reduce(x, "frobenius_norm")


def row_entropy_mean(x: Tensor, eps: float = EPS) -> Tensor:
    return reduce(x, "row_entropy_mean", eps)


def trace(x: Tensor) -> Tensor:
    if x.rows != x.cols:
        raise DimensionError(f"trace of non-square {x.shape}")
    n = x.rows
    return Tensor._from_op(
        np.array([[np.trace(x.data)]]), (x,), lambda g: (np.eye(n) * g[0, 0],), "trace"
    )


def column_mean(x: Tensor) -> Tensor:
    """Mean over rows, giving a 1 x cols tensor."""
    n = x.rows
    return Tensor._from_op(
        x.data.mean(axis=0, keepdims=True),
        (x,),
        lambda g: (np.repeat(g / n, n, axis=0),),
        "column_mean",
    )


def column_sum(x: Tensor) -> Tensor:
    n = x.rows
    return Tensor._from_op(
        x.data.sum(axis=0, keepdims=True),
        (x,),
        lambda g: (np.repeat(g, n, axis=0),),
        "column_sum",
    )


def row_sum(x: Tensor) -> Tensor:
    m = x.cols
    return Tensor._from_op(
        x.data.sum(axis=1, keepdims=True),
        (x,),
        lambda g: (np.repeat(g, m, axis=1),),
        "row_sum",
    )


# -- tape -----------------------------------------------------------------------


def tape(loss: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``loss`` in topological order."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``grad`` of every requires_grad leaf.

    Gradients add onto existing buffers; call ``zero_grad`` between steps.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
    for node in reversed(tape(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg


def grad_check(
    f: Callable[[], Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-6,
    floor: float = 1e-4,
) -> float:
    """Max relative error between backward gradients and central differences.

    ``f`` rebuilds the scalar computation from the current values of ``x``.
    The error for each entry is |analytic - numeric| / max(|analytic|,
    |numeric|, floor * max(1, |f(x)|)).  Central differences lose about
    eps * |f| / h to round-off, so entries below the floor are effectively
    compared in absolute terms instead of amplifying that noise.
    """
    if h <= 0:
        raise ContractError("h must be positive")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.grad = None
    loss = f()
    backward(loss)
    floor = floor * max(1.0, abs(loss.item()))
    worst = 0.0
    for t in xs:
        analytic = np.zeros(t.shape) if t.grad is None else t.grad.copy()
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = t.data[i]
            t.data[i] = orig + h
            fp = f().item()
            t.data[i] = orig - h
            fm = f().item()
            t.data[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = analytic[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for t in xs:
        t.grad = None
    return worst
