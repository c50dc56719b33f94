"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is a node in a computation graph: a numpy float64 array plus a
lazily allocated gradient of the same shape and links to the nodes that
produced it. Calling ``backward()`` on a scalar walks the graph once in
reverse topological order and accumulates chain-rule gradients into every
reachable node.

Broadcasting is deliberately restricted: tensor-tensor elementwise ops
require equal shapes, except ``add`` which also accepts a matrix plus a
row-vector bias. Everything else is a ShapeError; silent shape coercion is
where hand-rolled cores go wrong.
"""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

EPS_NORM = 1e-12


def _as_f64(data) -> np.ndarray:
    return np.asarray(data, dtype=np.float64)


class Tensor:
    """A graph node: float64 value, lazily zero gradient, producer links."""

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backprop=None):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad) or any(p.requires_grad for p in _parents)
        self._grad: np.ndarray | None = None
        # Graph links are only kept when a gradient can flow through them.
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backprop = _backprop if self.requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value: np.ndarray) -> None:
        self._grad = value

    def zero_grad(self) -> None:
        self._grad = None

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into every node reachable from self.

        self must be a scalar (shape () or (1,)). Each node's backprop rule
        runs exactly once, after all of its consumers.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward expects a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad[...] = 1.0
        for node in reversed(topo):
            if node._backprop is not None:
                node._backprop()

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Operator sugar. Scalar operands must be Python numbers, not tensors.

    def __add__(self, other):
        if isinstance(other, Tensor):
            return add(self, other)
        return shift(self, float(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            return add(self, scale(other, -1.0))
        return shift(self, -float(other))

    def __rsub__(self, other):
        return shift(scale(self, -1.0), float(other))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("tensor/tensor division is not a supported primitive")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)


def _make(data, parents, backprop) -> Tensor:
    return Tensor(data, _parents=parents, _backprop=backprop)


# ---------------------------------------------------------------------------
# elementwise and scalar ops


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts (r, c) + (c,) as a row-vector bias."""
    if a.shape == b.shape:
        out = _make(a.data + b.data, (a, b), None)

        def backprop():
            g = out.grad
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g

    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        out = _make(a.data + b.data, (a, b), None)

        def backprop():
            g = out.grad
            if a.requires_grad:
                a.grad += g
            if b.requires_grad:
                b.grad += g.sum(axis=0)

    else:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out._backprop = backprop if out.requires_grad else None
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = _make(a.data * b.data, (a, b), None)

    def backprop():
        g = out.grad
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    out._backprop = backprop if out.requires_grad else None
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = _make(x.data * c, (x,), None)

    def backprop():
        x.grad += out.grad * c

    out._backprop = backprop if out.requires_grad else None
    return out


def shift(x: Tensor, c: float) -> Tensor:
    out = _make(x.data + float(c), (x,), None)

    def backprop():
        x.grad += out.grad

    out._backprop = backprop if out.requires_grad else None
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product, 2-D x 2-D or batched 3-D x 3-D with equal batch size."""
    if a.ndim == 2 and b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    elif a.ndim == 3 and b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul: incompatible batched shapes {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul: expected 2-D or batched 3-D operands, got {a.shape} x {b.shape}")
    out = _make(a.data @ b.data, (a, b), None)

    def backprop():
        g = out.grad
        if a.requires_grad:
            a.grad += g @ np.swapaxes(b.data, -1, -2)
        if b.requires_grad:
            b.grad += np.swapaxes(a.data, -1, -2) @ g

    out._backprop = backprop if out.requires_grad else None
    return out


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.ndim < 2:
        raise ShapeError(f"transpose needs at least 2 dims, got {x.shape}")
    out = _make(np.swapaxes(x.data, -1, -2), (x,), None)

    def backprop():
        x.grad += np.swapaxes(out.grad, -1, -2)

    out._backprop = backprop if out.requires_grad else None
    return out


def dot(a: Tensor, b: Tensor) -> Tensor:
    """Inner product of two 1-D tensors, returning a scalar."""
    if a.ndim != 1 or b.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot: expected equal-length vectors, got {a.shape} and {b.shape}")
    out = _make(np.dot(a.data, b.data), (a, b), None)

    def backprop():
        g = out.grad
        if a.requires_grad:
            a.grad += g * b.data
        if b.requires_grad:
            b.grad += g * a.data

    out._backprop = backprop if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    """max(x, 0); the subgradient at exactly 0 is taken as 0."""
    out = _make(np.maximum(x.data, 0.0), (x,), None)

    def backprop():
        x.grad += out.grad * (x.data > 0.0)

    out._backprop = backprop if out.requires_grad else None
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # Split on sign to avoid exp overflow on large-magnitude logits.
    s = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = _make(s, (x,), None)

    def backprop():
        x.grad += out.grad * s * (1.0 - s)

    out._backprop = backprop if out.requires_grad else None
    return out


def log(x: Tensor) -> Tensor:
    out = _make(np.log(x.data), (x,), None)

    def backprop():
        x.grad += out.grad / x.data

    out._backprop = backprop if out.requires_grad else None
    return out


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    out = _make(e, (x,), None)

    def backprop():
        x.grad += out.grad * e

    out._backprop = backprop if out.requires_grad else None
    return out


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient passes only where x was not clipped."""
    out = _make(np.clip(x.data, lo, hi), (x,), None)

    def backprop():
        mask = (x.data >= lo) & (x.data <= hi)
        x.grad += out.grad * mask

    out._backprop = backprop if out.requires_grad else None
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along one axis. Outputs sum to 1 per slice."""
    if x.size == 0:
        raise ShapeError(f"softmax on empty input of shape {x.shape}")
    m = x.data.max(axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e / e.sum(axis=axis, keepdims=True)
    out = _make(s, (x,), None)

    def backprop():
        g = out.grad
        inner = (g * s).sum(axis=axis, keepdims=True)
        x.grad += s * (g - inner)

    out._backprop = backprop if out.requires_grad else None
    return out


def l2_normalize(x: Tensor, axis: int = -1, eps: float = EPS_NORM) -> Tensor:
    """x / max(norm(x), eps) along one axis.

    Slices with norm <= eps come out as (near) zeros and are treated as
    locally constant in the backward pass, mirroring the relu-at-0 choice.
    """
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    denom = np.maximum(norm, eps)
    y = x.data / denom
    out = _make(y, (x,), None)

    def backprop():
        g = out.grad
        inv = np.where(norm > eps, 1.0 / denom, 0.0)
        inner = (g * y).sum(axis=axis, keepdims=True)
        x.grad += (g - y * inner) * inv

    out._backprop = backprop if out.requires_grad else None
    return out


# ---------------------------------------------------------------------------
# reductions and reshaping


def reduce_sum(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    out = _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), None)

    def backprop():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.grad += np.broadcast_to(g, x.shape)

    out._backprop = backprop if out.requires_grad else None
    return out


def reduce_mean(x: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    count = x.size if axis is None else x.shape[axis]
    if count == 0:
        raise ShapeError(f"mean over an empty axis of shape {x.shape}")
    out = _make(x.data.mean(axis=axis, keepdims=keepdims), (x,), None)

    def backprop():
        g = out.grad
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        x.grad += np.broadcast_to(g, x.shape) / count

    out._backprop = backprop if out.requires_grad else None
    return out


def reduce_max(x: Tensor, axis: int) -> Tensor:
    """Max along one axis; the gradient routes to the first argmax only."""
    idx = np.argmax(x.data, axis=axis)
    expanded = np.expand_dims(idx, axis)
    out_data = np.take_along_axis(x.data, expanded, axis=axis).squeeze(axis)
    out = _make(out_data, (x,), None)

    def backprop():
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expanded, np.expand_dims(out.grad, axis), axis=axis)
        x.grad += gx

    out._backprop = backprop if out.requires_grad else None
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"cannot reshape {x.shape} into {shape}") from e
    out = _make(data, (x,), None)

    def backprop():
        x.grad += out.grad.reshape(x.shape)

    out._backprop = backprop if out.requires_grad else None
    return out


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = list(tensors)
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), None)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backprop():
        g = out.grad
        for part, start, stop in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(start, stop)
                part.grad += g[tuple(sl)]

    out._backprop = backprop if out.requires_grad else None
    return out


def repeat_cols(x: Tensor, times: int) -> Tensor:
    """Repeat each column of a (r, c) tensor `times` times, giving (r, c*times)."""
    if x.ndim != 2:
        raise ShapeError(f"repeat_cols needs a 2-D tensor, got {x.shape}")
    out = _make(np.repeat(x.data, times, axis=1), (x,), None)

    def backprop():
        r, c = x.shape
        x.grad += out.grad.reshape(r, c, times).sum(axis=2)

    out._backprop = backprop if out.requires_grad else None
    return out


def gather_rows(x: Tensor, ids: np.ndarray) -> Tensor:
    """Select rows of a 2-D tensor; gradients scatter-add into those rows only."""
    if x.ndim != 2:
        raise ShapeError(f"gather_rows needs a 2-D tensor, got {x.shape}")
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[0]):
        raise IndexError(f"row id out of range for table with {x.shape[0]} rows: {ids.min()}..{ids.max()}")
    out = _make(x.data[ids], (x,), None)

    def backprop():
        np.add.at(x.grad, ids, out.grad)

    out._backprop = backprop if out.requires_grad else None
    return out


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with probability `rate`, scale the rest by 1/(1-rate)."""
    if not 0.0 <= rate < 1.0:
        raise ShapeError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    out = _make(x.data * mask, (x,), None)

    def backprop():
        x.grad += out.grad * mask

    out._backprop = backprop if out.requires_grad else None
    return out


def gradients(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Zero the given parameters, backprop from a scalar loss, return copies.

    Parameters with no path to the loss keep an all-zero gradient.
    """
    for p in params.values():
        p.zero_grad()
    loss.backward()
    return {name: p.grad.copy() for name, p in params.items()}
