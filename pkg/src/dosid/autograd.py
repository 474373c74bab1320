"""Minimal reverse-mode autodiff over float64 numpy arrays.

The computation graph is the implicit DAG of Tensor objects: every op
returns a new Tensor that references its inputs and carries a closure
routing upstream gradients to them. ``backward()`` toposorts the DAG from
the seed node and runs the closures in reverse, so evaluation order is
deterministic for identical construction order.

Tensor buffers are immutable after creation (marked read-only). Parameters
are updated between graph constructions through ``Tensor.assign``.

Hard decisions (top-k selection, nearest-code argmin) are not ops here;
callers compute them on raw ``.data`` and rebuild gradient routes with
explicit straight-through compositions out of ``stop_gradient``.

Broadcasting is restricted: equal shapes, scalars, a trailing-suffix shape
against a batched stack (e.g. (S, d) over (Z, S, d)), or a leading-1 row
shape like (1, d) over (S, d). Anything else raises.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class NumericError(ArithmeticError):
    """A non-finite value appeared while building or differentiating a graph."""


def _as_array(data) -> np.ndarray:
    return np.array(data, dtype=np.float64)


def _check_finite(arr: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by '{where}'")


def _require_broadcastable(a: "Tensor", b: "Tensor", op: str) -> None:
    sa, sb = a.data.shape, b.data.shape
    if sa == sb or sa == () or sb == ():
        return
    small, big = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(small) < len(big) and big[len(big) - len(small):] == small:
        return
    if len(small) == len(big):
        # same rank: allow size-1 axes, but only as a leading prefix
        # ((1, d) over (S, d) yes; (S, 1) column broadcast no)
        differing = [i for i in range(len(sa)) if sa[i] != sb[i]]
        if differing and all(1 in (sa[i], sb[i]) for i in differing) \
                and differing == list(range(len(differing))):
            return
    raise ValueError(f"{op}: shapes {sa} and {sb} are not broadcast-compatible "
                     "(only scalar, suffix, or leading-1 broadcasting is allowed)")


def _reduce_to_shape(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a broadcasted gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """An immutable float64 array plus the bookkeeping for reverse mode."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _share_buffer: bool = False):
        arr = np.asarray(data, dtype=np.float64) if _share_buffer else _as_array(data)
        _check_finite(arr, name or "tensor")
        if not _share_buffer:
            arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    # -- construction --------------------------------------------------

    @staticmethod
    def _from_op(value: np.ndarray, parents: Sequence["Tensor"], op: str,
                 backward: Callable[[np.ndarray], None]) -> "Tensor":
        value = np.asarray(value)  # ufuncs on 0-d inputs return array scalars
        _check_finite(value, op)
        value.flags.writeable = False
        out = Tensor.__new__(Tensor)
        out.data = value
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out.name = op
        out._parents = tuple(parents) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        return out

    def assign(self, new_data: np.ndarray) -> None:
        """Overwrite the buffer in place; only legal between graph builds."""
        arr = np.asarray(new_data, dtype=np.float64)
        if arr.shape != self.data.shape:
            raise ValueError(f"assign: shape {arr.shape} != {self.data.shape}")
        _check_finite(arr, f"assign({self.name})")
        self.data.flags.writeable = True
        np.copyto(self.data, arr)
        self.data.flags.writeable = False

    # -- convenience ---------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # -- autodiff core ---------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Seed d(self)/d(self)=1 and push gradients to every reachable node.

        The seed must be scalar-valued (size 1).
        """
        if self.data.size != 1:
            raise ValueError("backward: seed node must be scalar-valued")
        order = _toposort(self)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            _check_finite(node.grad, f"grad({node.name})")
            node._backward(node.grad)

    # -- operators -------------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other))

    def __radd__(self, other):
        return add(_coerce(other), self)

    def __sub__(self, other):
        return sub(self, _coerce(other))

    def __rsub__(self, other):
        return sub(_coerce(other), self)

    def __mul__(self, other):
        return mul(self, _coerce(other))

    def __rmul__(self, other):
        return mul(_coerce(other), self)

    def __neg__(self):
        return mul(self, _coerce(-1.0))

    def __matmul__(self, other):
        return matmul(self, _coerce(other))

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return tmean(self, axis)


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(seed: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(seed, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- primitives ----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_broadcastable(a, b, "add")
    value = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(g, b.data.shape))

    return Tensor._from_op(value, (a, b), "add", backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_broadcastable(a, b, "sub")
    value = a.data - b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(-g, b.data.shape))

    return Tensor._from_op(value, (a, b), "sub", backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_broadcastable(a, b, "mul")
    value = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_reduce_to_shape(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_reduce_to_shape(g * a.data, b.data.shape))

    return Tensor._from_op(value, (a, b), "mul", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError("matmul: operands must be at least 2-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul: inner extents differ, {a.data.shape} @ {b.data.shape}")
    value = a.data @ b.data

    def backward(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_reduce_to_shape(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_reduce_to_shape(gb, b.data.shape))

    return Tensor._from_op(value, (a, b), "matmul", backward)


def transpose_last(a: Tensor) -> Tensor:
    value = np.swapaxes(a.data, -1, -2).copy()

    def backward(g):
        if a.requires_grad:
            a._accumulate(np.swapaxes(g, -1, -2))

    return Tensor._from_op(value, (a,), "transpose_last", backward)


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    value = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if not a.requires_grad:
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy())

    return Tensor._from_op(value, (a,), "sum", backward)


def tmean(a: Tensor, axis: int | None = None) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    value = np.asarray(a.data.mean(axis=axis))

    def backward(g):
        if not a.requires_grad:
            return
        scaled = g / n
        if axis is None:
            a._accumulate(np.broadcast_to(scaled, a.data.shape).copy())
        else:
            a._accumulate(np.broadcast_to(np.expand_dims(scaled, axis), a.data.shape).copy())

    return Tensor._from_op(value, (a,), "mean", backward)


def sigmoid(a: Tensor) -> Tensor:
    # two-branch form avoids overflow in exp for large |x|
    x = a.data
    value = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                     np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * value * (1.0 - value))

    return Tensor._from_op(value, (a,), "sigmoid", backward)


def relu(a: Tensor) -> Tensor:
    value = np.maximum(a.data, 0.0)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * (a.data > 0.0))

    return Tensor._from_op(value, (a,), "relu", backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="raise", invalid="raise"):
        try:
            value = np.log(a.data)
        except FloatingPointError as exc:
            raise NumericError(f"log of non-positive value: {exc}") from exc

    def backward(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return Tensor._from_op(value, (a,), "log", backward)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes only through the un-clamped interior."""
    value = np.clip(a.data, lo, hi)
    interior = (a.data > lo) & (a.data < hi)

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * interior)

    return Tensor._from_op(value, (a,), "clip", backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        if a.requires_grad:
            inner = (g * value).sum(axis=-1, keepdims=True)
            a._accumulate((g - inner) * value)

    return Tensor._from_op(value, (a,), "softmax", backward)


def log_softmax(a: Tensor) -> Tensor:
    """Log-softmax over the last axis (numerically stable)."""
    m = a.data.max(axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    value = shifted - lse

    def backward(g):
        if a.requires_grad:
            soft = np.exp(value)
            a._accumulate(g - soft * g.sum(axis=-1, keepdims=True))

    return Tensor._from_op(value, (a,), "log_softmax", backward)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = a.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("layer_norm: gain/bias must have shape (d,)")
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    value = xhat * gain.data + bias.data

    def backward(g):
        if gain.requires_grad:
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            dxhat = g * gain.data
            term = dxhat - dxhat.mean(axis=-1, keepdims=True) \
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            a._accumulate(term * inv_std)

    return Tensor._from_op(value, (a, gain, bias), "layer_norm", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    value = np.concatenate([t.data for t in tensors], axis=axis)
    extents = [t.data.shape[axis] for t in tensors]

    def backward(g):
        offset = 0
        for t, extent in zip(tensors, extents):
            if t.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(offset, offset + extent)
                t._accumulate(g[tuple(index)])
            offset += extent

    return Tensor._from_op(value, tuple(tensors), "concat", backward)


def gather_rows(table: Tensor, indices: np.ndarray) -> Tensor:
    """Select rows of a 2-D table; gradient scatter-adds into the table."""
    if table.data.ndim != 2:
        raise ValueError("gather_rows: table must be 2-D")
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError("gather_rows: indices must be integers")
    value = table.data[idx]

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            table._accumulate(gt)

    return Tensor._from_op(value, (table,), "gather_rows", backward)


def take_last(a: Tensor, indices: np.ndarray) -> Tensor:
    """Pick one entry along the last axis per leading position."""
    idx = np.asarray(indices)
    if idx.shape != a.data.shape[:-1]:
        raise ValueError(f"take_last: indices shape {idx.shape} != {a.data.shape[:-1]}")
    value = np.take_along_axis(a.data, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        if a.requires_grad:
            ga = np.zeros_like(a.data)
            np.put_along_axis(ga, idx[..., None], g[..., None], axis=-1)
            a._accumulate(ga)

    return Tensor._from_op(value, (a,), "take_last", backward)


def stop_gradient(a: Tensor) -> Tensor:
    """Exact forward identity (shares the buffer); blocks all gradient flow."""
    return Tensor(a.data, requires_grad=False, name="stop_gradient", _share_buffer=True)


# -- checking --------------------------------------------------------------


def gradient_check(fn: Callable[[], Tensor], wrt: Iterable[Tensor],
                   eps: float = 1e-4) -> float:
    """Compare analytic gradients of the scalar ``fn()`` against central differences.

    ``fn`` must rebuild the graph from the current contents of the ``wrt``
    tensors every time it is called. Returns the max over all coordinates of
    |analytic - numeric| / max(1, |analytic|).
    """
    if eps <= 0:
        raise ValueError("gradient_check: eps must be positive")
    params = list(wrt)
    for p in params:
        p.grad = None
    out = fn()
    if out.data.size != 1:
        raise ValueError("gradient_check: fn must be scalar-valued")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    max_rel = 0.0
    for p, ga in zip(params, analytic):
        base = p.data.copy()
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            p.assign(base)
            plus = fn().item()
            flat[i] = orig - eps
            p.assign(base)
            minus = fn().item()
            flat[i] = orig
            p.assign(base)
            if not (np.isfinite(plus) and np.isfinite(minus)):
                raise NumericError("gradient_check: non-finite perturbed evaluation")
            numeric = (plus - minus) / (2.0 * eps)
            a = ga.reshape(-1)[i]
            rel = abs(a - numeric) / max(1.0, abs(a))
            max_rel = max(max_rel, rel)
    return max_rel
