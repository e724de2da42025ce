"""A small dense-tensor engine with reverse-mode differentiation.

Tensors wrap float64 numpy arrays.  Operations on tensors that belong to a
:class:`Tape` are recorded on it; :meth:`Tape.backward` then walks the
record in reverse and accumulates vector-Jacobian products into the leaves.
Tensors without a tape behave as plain values, so the same functions serve
for gradient-free evaluation.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    pass


class NumericalError(ArithmeticError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "tape", "name")

    def __init__(self, data, requires_grad: bool = False, tape: "Tape | None" = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape = tape
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of primitive operations.

    Nodes are appended as operations execute, so the list is already in
    topological order.  After :meth:`backward` the tape is spent until
    :meth:`reset` is called.
    """

    def __init__(self):
        self.nodes: list[tuple[str, Tensor, tuple[Tensor, ...], Callable]] = []
        self.leaves: list[Tensor] = []
        self._spent = False

    def leaf(self, data, requires_grad: bool = True, name: str | None = None) -> Tensor:
        if self._spent:
            raise TapeError("tape already consumed by backward(); call reset() first")
        t = Tensor(data, requires_grad=requires_grad, tape=self, name=name)
        if requires_grad:
            self.leaves.append(t)
        return t

    def constant(self, data, name: str | None = None) -> Tensor:
        return Tensor(data, requires_grad=False, tape=self, name=name)

    def reset(self) -> None:
        self.nodes.clear()
        self.leaves.clear()
        self._spent = False

    def _record(self, op, out, parents, vjp):
        if self._spent:
            raise TapeError("tape already consumed by backward(); call reset() first")
        self.nodes.append((op, out, parents, vjp))

    def backward(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Populate ``.grad`` on every leaf and return them keyed by leaf name.

        Leaves the loss does not depend on receive a zero gradient.
        """
        if self._spent:
            raise TapeError("tape already consumed by backward(); call reset() first")
        if loss.data.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise TapeError("loss was not computed on this tape")

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for op, out, parents, vjp in reversed(self.nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for parent, pg in zip(parents, vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        result = {}
        for i, leaf in enumerate(self.leaves):
            g = grads.get(id(leaf))
            leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=np.float64).reshape(leaf.shape)
            result[leaf.name if leaf.name is not None else str(i)] = leaf.grad
        self._spent = True
        return result


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(tensors: Sequence[Tensor]) -> "Tape | None":
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError("operands belong to different tapes")
            tape = t.tape
    return tape


def _emit(op: str, data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"non-finite value produced by {op}")
    tape = _tape_of(parents)
    needs_grad = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad and tape is not None, tape=tape)
    if out.requires_grad:
        tape._record(op, out, tuple(parents), vjp)
    return out


def _shape_error(op, a, b):
    return ShapeError(f"{op}: incompatible shapes {tuple(a)} and {tuple(b)}")


# ---------------------------------------------------------------------------
# primitives


def matmul(x, W) -> Tensor:
    x, W = as_tensor(x), as_tensor(W)
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[0]:
        raise _shape_error("matmul", x.shape, W.shape)
    xd, Wd = x.data, W.data

    def vjp(g):
        gx = g @ Wd.T if x.requires_grad else None
        if not W.requires_grad:
            gW = None
        elif xd.ndim == 1:
            gW = np.outer(xd, g)
        else:
            gW = xd.T @ g
        return gx, gW

    return _emit("matmul", xd @ Wd, (x, W), vjp)


def add(a, b) -> Tensor:
    """Elementwise sum; a 1-D ``b`` broadcasts over the rows of a 2-D ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    row_bcast = a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]
    if a.shape != b.shape and not row_bcast:
        raise _shape_error("add", a.shape, b.shape)

    def vjp(g):
        return g, (g.sum(axis=0) if row_bcast else g)

    return _emit("add", a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("sub", a.shape, b.shape)
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise _shape_error("mul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def linear(x, W, b) -> Tensor:
    """Affine map ``y = x W + b`` for a vector or a batch of row vectors."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    if W.ndim != 2 or x.ndim not in (1, 2) or x.shape[-1] != W.shape[0]:
        raise _shape_error("linear", x.shape, W.shape)
    if b.shape != (W.shape[1],):
        raise _shape_error("linear", W.shape, b.shape)
    xd, Wd = x.data, W.data

    def vjp(g):
        gx = g @ Wd.T if x.requires_grad else None
        if not W.requires_grad:
            gW = None
        elif xd.ndim == 1:
            gW = np.outer(xd, g)
        else:
            gW = xd.T @ g
        gb = g if g.ndim == 1 else g.sum(axis=0)
        return gx, gW, gb

    return _emit("linear", xd @ Wd + b.data, (x, W, b), vjp)


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _softplus(t: np.ndarray) -> np.ndarray:
    return np.maximum(t, 0.0) + np.log1p(np.exp(-np.abs(t)))


def activate(x, kind: str) -> Tensor:
    x = as_tensor(x)
    if kind == "sigmoid":
        s = _sigmoid(x.data)
        return _emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))
    if kind == "softplus":
        return _emit("softplus", _softplus(x.data), (x,), lambda g: (g * _sigmoid(x.data),))
    raise ValueError(f"unknown activation {kind!r}")


def sigmoid(x) -> Tensor:
    return activate(x, "sigmoid")


def softplus(x) -> Tensor:
    return activate(x, "softplus")


def mean_rows(M) -> Tensor:
    """Column-wise mean; a 1-D input reduces to a scalar."""
    M = as_tensor(M)
    n = M.shape[0] if M.ndim else 0
    if n == 0:
        raise ShapeError("mean_rows: empty input (no rows)")

    def vjp(g):
        return (np.broadcast_to(g / n, M.shape).copy(),)

    return _emit("mean_rows", M.data.mean(axis=0), (M,), vjp)


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[0]
    return _emit("gather_rows", x.data[index], (x,), lambda g: (_kernels.segment_sum(g, index, n),))


def segment_sum(x, index, n_segments: int) -> Tensor:
    """Sum rows of ``x`` into ``n_segments`` rows; empty segments stay zero."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape != (x.shape[0],):
        raise _shape_error("segment_sum", x.shape, index.shape)
    out = _kernels.segment_sum(x.data, index, n_segments)
    return _emit("segment_sum", out, (x,), lambda g: (g[index],))


def segment_mean(x, index, n_segments: int) -> Tensor:
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    counts = np.bincount(index, minlength=n_segments).astype(np.float64)
    if np.any(counts == 0):
        raise ShapeError("segment_mean: empty segment (graph with no atoms)")
    out = _kernels.segment_sum(x.data, index, n_segments) / counts[:, None]
    return _emit("segment_mean", out, (x,), lambda g: ((g / counts[:, None])[index],))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    datas = [t.data for t in tensors]
    try:
        out = np.concatenate(datas, axis=axis)
    except ValueError:
        raise ShapeError("concat: incompatible shapes " + ", ".join(str(d.shape) for d in datas)) from None
    cuts = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def vjp(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", out, tuple(tensors), vjp)


def weighted_sum(x, w) -> Tensor:
    """Scalar ``sum(w * x)`` with constant weights ``w``."""
    x = as_tensor(x)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise _shape_error("weighted_sum", x.shape, w.shape)
    return _emit("weighted_sum", np.asarray(np.sum(w * x.data)), (x,), lambda g: (g * w,))


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-5, order: int = 2) -> np.ndarray:
    """Central-difference gradient of a scalar function of an array.

    ``order=2`` is the three-point stencil ``(f(x+h) - f(x-h)) / 2h``;
    ``order=4`` is the five-point stencil, whose O(h^4) truncation error allows
    a larger ``h`` and so less cancellation error on small components.
    """
    if order == 2:
        steps = (1.0, -1.0)
    elif order == 4:
        steps = (1.0, -1.0, 2.0, -2.0)
    else:
        raise ValueError(f"order must be 2 or 4, got {order}")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        vals = []
        for s in steps:
            flat[i] = orig + s * h
            vals.append(float(f(x)))
        flat[i] = orig
        if not all(np.isfinite(v) for v in vals):
            raise NumericalError(f"non-finite function value at coordinate {i}")
        # differences first, so a flat direction gives exactly zero
        if order == 2:
            gflat[i] = (vals[0] - vals[1]) / (2.0 * h)
        else:
            gflat[i] = (8.0 * (vals[0] - vals[1]) - (vals[2] - vals[3])) / (12.0 * h)
    return grad
