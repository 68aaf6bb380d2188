"""Small reverse-mode autodiff engine over dense float64 numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients.  ``backward``
orders the recorded graph topologically (the tape) and walks it once in
reverse.  Gradients are recomputed from scratch on every call, so running
``backward`` twice on the same output gives identical results.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp


class AutodiffError(Exception):
    pass


class ShapeMismatch(AutodiffError):
    pass


class DomainError(AutodiffError):
    pass


class NumericalError(AutodiffError):
    pass


class NonScalarOutput(AutodiffError):
    pass


class Tensor:
    __slots__ = ("value", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        arr = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericalError(f"non-finite values in tensor {name or ''}".strip())
        self.value = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.value.size != 1:
            raise NonScalarOutput(f"tensor of shape {self.shape} is not a scalar")
        return float(self.value.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.value.copy()

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(value: np.ndarray, parents: Sequence[Tensor], backward, opname: str) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"{opname} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{opname}: {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.value + float(b), (a,), lambda g: (g,), "add")
    a = as_tensor(a)
    _check_same(a, b, "add")
    return _make(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        return _make(a.value - float(b), (a,), lambda g: (g,), "sub")
    a = as_tensor(a)
    _check_same(a, b, "sub")
    return _make(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = as_tensor(a)
        c = float(b)
        return _make(a.value * c, (a,), lambda g: (g * c,), "mul")
    a = as_tensor(a)
    _check_same(a, b, "mul")
    av, bv = a.value, b.value
    return _make(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def add_row(x: Tensor, row: Tensor) -> Tensor:
    """Add a length-d vector to every row of an (n, d) matrix (bias add)."""
    if x.value.ndim != 2 or row.value.ndim != 1 or x.shape[1] != row.shape[0]:
        raise ShapeMismatch(f"add_row: {x.shape} and {row.shape}")
    return _make(x.value + row.value, (x, row), lambda g: (g, g.sum(axis=0)), "add_row")


def mul_row(x: Tensor, row: Tensor) -> Tensor:
    """Scale the columns of an (n, d) matrix by a length-d vector."""
    if x.value.ndim != 2 or row.value.ndim != 1 or x.shape[1] != row.shape[0]:
        raise ShapeMismatch(f"mul_row: {x.shape} and {row.shape}")
    xv, rv = x.value, row.value
    return _make(xv * rv, (x, row), lambda g: (g * rv, (g * xv).sum(axis=0)), "mul_row")


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _make(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow is reported by _make as NumericalError
        out = np.exp(x.value)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    if np.any(x.value <= 0):
        raise DomainError("log of a non-positive value")
    xv = x.value
    return _make(np.log(xv), (x,), lambda g: (g / xv,), "log")


def sqrt(x: Tensor) -> Tensor:
    if np.any(x.value < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(x.value)
    if np.any(out == 0):
        raise DomainError("sqrt is not differentiable at 0")
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


# ------------------------------------------------------------------ reductions


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.value.sum(axis=axis)), (x,), back, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.value.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


# --------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def back(g):
        if av.ndim == 1 and bv.ndim == 1:
            return g * bv, g * av
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _make(av @ bv, (a, b), back, "matmul")


def const_matmul(m, x: Tensor) -> Tensor:
    """Left-multiply by a constant (dense or scipy sparse) matrix."""
    if m.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"const_matmul: {m.shape} @ {x.shape}")
    mt = m.T
    out = m @ x.value
    out = np.asarray(out.todense() if sp.issparse(out) else out)
    return _make(out, (x,), lambda g: (np.asarray(mt @ g),), "const_matmul")


def transpose(x: Tensor) -> Tensor:
    if x.value.ndim != 2:
        raise ShapeMismatch("transpose expects a matrix")
    return _make(x.value.T.copy(), (x,), lambda g: (g.T,), "transpose")


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    return _make(out.copy(), (x,), lambda g: (g.reshape(old),), "reshape")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [x.value for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None
    bounds = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _make(out, tuple(xs), lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def stack_mean(xs: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    if not xs:
        raise ShapeMismatch("stack_mean of nothing")
    total = xs[0]
    for x in xs[1:]:
        total = add(total, x)
    return mul(total, 1.0 / len(xs))


# ------------------------------------------------------------- structured ops


def softmax_rows(x: Tensor) -> Tensor:
    """Softmax along the last axis."""
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), back, "softmax_rows")


def log_softmax_rows(x: Tensor) -> Tensor:
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), back, "log_softmax_rows")


def sq_dist(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise squared euclidean distances between rows of x (n,d) and y (m,d)."""
    xv, yv = np.atleast_2d(x.value), np.atleast_2d(y.value)
    if xv.shape[1] != yv.shape[1]:
        raise ShapeMismatch(f"sq_dist: {x.shape} vs {y.shape}")
    diff = xv[:, None, :] - yv[None, :, :]
    out = (diff * diff).sum(axis=-1)
    squeeze_x, squeeze_y = x.value.ndim == 1, y.value.ndim == 1

    def back(g):
        g2 = np.asarray(g).reshape(out.shape)
        t = 2.0 * g2[:, :, None] * diff
        gx, gy = t.sum(axis=1), -t.sum(axis=0)
        return (gx[0] if squeeze_x else gx), (gy[0] if squeeze_y else gy)

    value = out
    if squeeze_x and squeeze_y:
        value = out[0, 0]
    elif squeeze_x:
        value = out[0]
    elif squeeze_y:
        value = out[:, 0]
    return _make(np.asarray(value), (x, y), back, "sq_dist")


def cosine_sim(x: Tensor, y: Tensor) -> Tensor:
    """Pairwise cosine similarity between rows of x (n,d) and y (m,d).

    Two vectors give a scalar.  Zero-norm rows raise DomainError.
    """
    xv, yv = np.atleast_2d(x.value), np.atleast_2d(y.value)
    if xv.shape[1] != yv.shape[1]:
        raise ShapeMismatch(f"cosine_sim: {x.shape} vs {y.shape}")
    nx = np.linalg.norm(xv, axis=1)
    ny = np.linalg.norm(yv, axis=1)
    if np.any(nx == 0) or np.any(ny == 0):
        raise DomainError("cosine similarity of a zero vector")
    ux, uy = xv / nx[:, None], yv / ny[:, None]
    out = ux @ uy.T
    squeeze_x, squeeze_y = x.value.ndim == 1, y.value.ndim == 1

    def back(g):
        g2 = np.asarray(g).reshape(out.shape)
        # d cos / d x_i = (uy_j - cos_ij ux_i) / |x_i|
        gx = (g2 @ uy - (g2 * out).sum(axis=1)[:, None] * ux) / nx[:, None]
        gy = (g2.T @ ux - (g2 * out).sum(axis=0)[:, None] * uy) / ny[:, None]
        return (gx[0] if squeeze_x else gx), (gy[0] if squeeze_y else gy)

    value = out
    if squeeze_x and squeeze_y:
        value = out[0, 0]
    elif squeeze_x:
        value = out[0]
    elif squeeze_y:
        value = out[:, 0]
    return _make(np.asarray(value), (x, y), back, "cosine_sim")


def gather(x: Tensor, indices) -> Tensor:
    """``x[indices]`` with numpy fancy indexing; backward scatters into place."""
    try:
        out = x.value[indices]
    except IndexError as exc:
        raise ShapeMismatch(str(exc)) from None
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, indices, g)
        return (full,)

    return _make(np.array(out), (x,), back, "gather")


def scatter(values: Tensor, indices, shape) -> Tensor:
    """Place ``values`` at ``indices`` of a zero array of ``shape`` (adjoint of gather)."""
    out = np.zeros(shape)
    try:
        np.add.at(out, indices, values.value)
    except (IndexError, ValueError) as exc:
        raise ShapeMismatch(str(exc)) from None
    return _make(out, (values,), lambda g: (g[indices],), "scatter")


# -------------------------------------------------------------------- backward


def topological_order(output: Tensor) -> list[Tensor]:
    """Nodes reachable from ``output``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _propagate(output: Tensor) -> tuple[list[Tensor], dict[int, np.ndarray]]:
    if output.value.size != 1:
        raise NonScalarOutput(f"backward needs a scalar output, got shape {output.shape}")
    tape = topological_order(output)
    pending: dict[int, np.ndarray] = {id(output): np.ones_like(output.value)}
    grads: dict[int, np.ndarray] = {}
    for node in reversed(tape):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            grads[id(node)] = g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            key = id(parent)
            pending[key] = pending[key] + pg if key in pending else pg
    return tape, grads


def backward(output: Tensor) -> None:
    """Set ``.grad`` on every requires_grad tensor feeding ``output``.

    Gradients are overwritten, never accumulated across calls.
    """
    tape, grads = _propagate(output)
    for node in tape:
        if node.requires_grad:
            g = grads.get(id(node))
            node.grad = np.zeros_like(node.value) if g is None else g


def gradients(output: Tensor, leaves: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of ``output`` w.r.t. ``leaves`` without touching ``.grad``."""
    _, grads = _propagate(output)
    return [grads[id(l)].copy() if id(l) in grads else np.zeros_like(l.value) for l in leaves]


# ---------------------------------------------------------------- grad check


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    excluded: list[int] = field(default_factory=list)
    tol: float = 1e-4

    @property
    def max_rel_err(self) -> float:
        mask = np.ones(self.rel_err.size, dtype=bool)
        mask[self.excluded] = False
        return float(self.rel_err.reshape(-1)[mask].max()) if mask.any() else 0.0

    @property
    def failures(self) -> list[int]:
        flat = self.rel_err.reshape(-1)
        return [i for i in range(flat.size) if i not in self.excluded and flat[i] >= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures


def grad_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-6, tol: float = 1e-4) -> GradCheckReport:
    """Compare tape gradients with central differences at ``point``.

    Coordinates where the one-sided difference quotients disagree are
    treated as kinks (e.g. relu at exactly 0) and excluded from the verdict.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x0 = np.array(point, dtype=np.float64)
    x = Tensor(x0, requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad.copy()
    f0 = out.item()

    def fval(v):
        return f(Tensor(v)).item()

    numeric = np.zeros_like(x0)
    excluded = []
    flat = x0.reshape(-1)
    for i in range(flat.size):
        plus = flat.copy()
        minus = flat.copy()
        plus[i] += h
        minus[i] -= h
        fp = fval(plus.reshape(x0.shape))
        fm = fval(minus.reshape(x0.shape))
        numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        fwd, bwd = (fp - f0) / h, (f0 - fm) / h
        if abs(fwd - bwd) > 1e-3 * max(1.0, abs(fwd), abs(bwd)):
            excluded.append(i)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic, numeric, rel, excluded, tol)
