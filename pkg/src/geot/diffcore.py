"""Minimal taped reverse-mode differentiation over numpy float64 arrays.

A :class:`Tensor` records the operation that produced it; calling
:meth:`Tensor.backward` on a scalar walks the tape in reverse topological
order.  Leaves obtained from a :class:`ParamStore` accumulate their gradient
straight into the store's flat gradient slots.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np
from scipy import sparse

CHECKPOINT_HEADER = "GEOTCKPT v1"


class NumericalError(RuntimeError):
    """A loss or gradient became non-finite."""

    def __init__(self, message: str, where: str | None = None):
        super().__init__(message)
        self.where = where


class ConfigError(ValueError):
    """Shapes or settings do not fit together."""


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "parents", "backward_fn", "requires_grad", "sink")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, sink=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.sink = sink

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data.item())

    def _accumulate(self, g: np.ndarray) -> None:
        # never in place: ``g`` may be a view of another node's gradient
        self.grad = g if self.grad is None else self.grad + g

    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() needs a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node.parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node.grad is None:
                continue
            if node.backward_fn is not None:
                node.backward_fn(node.grad)
            if node.sink is not None:
                node.sink(node.grad)
        # free intermediate buffers so repeated calls cannot double count
        for node in order:
            node.grad = None

    # operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return index_select(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return tmean(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(value: np.ndarray, parents: tuple, grad_fns: tuple) -> Tensor:
    """Build a tape node.

    ``grad_fns[i]`` maps the upstream gradient to the contribution for
    ``parents[i]``; entries for parents that do not require grad are skipped.
    """
    parents = tuple(as_tensor(p) for p in parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(value)

    def backward_fn(g):
        for p, fn in zip(parents, grad_fns):
            if p.requires_grad and fn is not None:
                p._accumulate(fn(g))

    return Tensor(value, parents, backward_fn, requires_grad=True)


# elementwise -------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data + b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data - b.data,
        (a, b),
        (lambda g: _unbroadcast(g, a.shape), lambda g: _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data * b.data,
        (a, b),
        (
            lambda g: _unbroadcast(g * b.data, a.shape),
            lambda g: _unbroadcast(g * a.data, b.shape),
        ),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return make_op(
        out,
        (a, b),
        (
            lambda g: _unbroadcast(g / b.data, a.shape),
            lambda g: _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    if exponent == 0:
        return Tensor(np.ones_like(a.data))
    return make_op(
        a.data**exponent,
        (a,),
        (lambda g: g * exponent * a.data ** (exponent - 1),),
    )


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), (lambda g: g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), (lambda g: g / a.data,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(np.where(mask, a.data, 0.0), (a,), (lambda g: g * mask,))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    return make_op(out, (a,), (lambda g: g * sig,))


def clamp_min(a, floor: float) -> Tensor:
    a = as_tensor(a)
    mask = a.data >= floor
    return make_op(np.maximum(a.data, floor), (a,), (lambda g: g * mask,))


# reductions / shape -------------------------------------------------------
def tsum(a, axis=None) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis)

    def grad(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape)

    return make_op(out, (a,), (grad,))


def tmean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return tsum(a, axis) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), (lambda g: g.reshape(a.shape),))


def concat(tensors, axis=-1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def slicer(i):
        def grad(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(bounds[i], bounds[i + 1])
            return g[tuple(sl)]

        return grad

    return make_op(out, tuple(tensors), tuple(slicer(i) for i in range(len(tensors))))


def scatter_rows(g: np.ndarray, index: np.ndarray, n_rows: int) -> np.ndarray:
    """Sum rows of ``g`` into ``n_rows`` buckets given by ``index``."""
    flat = g.reshape(len(index), -1)
    csr = sparse.csr_matrix(
        (np.ones(len(index)), (index, np.arange(len(index)))), shape=(n_rows, len(index))
    )
    return np.asarray(csr @ flat).reshape((n_rows,) + g.shape[1:])


def index_select(a, index) -> Tensor:
    """Fancy or basic indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    if isinstance(index, np.ndarray) and index.ndim == 1 and index.dtype.kind in "iu":

        def grad(g):
            return scatter_rows(g, index, a.shape[0])

        return make_op(a.data[index], (a,), (grad,))

    def grad(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return full

    return make_op(a.data[index], (a,), (grad,))


def pick(a, labels: np.ndarray) -> Tensor:
    """Row-wise gather ``a[k, labels[k]]`` of a 2-D tensor."""
    a = as_tensor(a)
    rows = np.arange(a.shape[0])

    def grad(g):
        full = np.zeros_like(a.data)
        full[rows, labels] = g
        return full

    return make_op(a.data[rows, labels], (a,), (grad,))


# linear algebra -----------------------------------------------------------
def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return make_op(
        a.data @ b.data,
        (a, b),
        (lambda g: g @ b.data.T, lambda g: a.data.T @ g),
    )


def row_times_matrix(p, T) -> Tensor:
    """Batched row-vector/matrix product: ``out[k] = p[k] @ T[k]``."""
    p, T = as_tensor(p), as_tensor(T)
    out = np.einsum("km,kmn->kn", p.data, T.data)
    return make_op(
        out,
        (p, T),
        (
            lambda g: np.einsum("kn,kmn->km", g, T.data),
            lambda g: p.data[:, :, None] * g[:, None, :],
        ),
    )


def softmax(a, axis=-1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return make_op(s, (a,), (lambda g: s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def neighbor_max(h, neighbors: np.ndarray) -> Tensor:
    """``out[i] = max_j h[neighbors[i, j]]`` feature-wise.

    The gradient flows to the arg-max neighbour only (first one on ties).
    """
    h = as_tensor(h)
    n, width = h.shape
    if not h.requires_grad:
        return Tensor(h.data[neighbors.T].max(axis=0))
    out = h.data[neighbors[:, 0]]
    src = np.repeat(neighbors[:, :1], width, axis=1)
    for j in range(1, neighbors.shape[1]):
        cand = h.data[neighbors[:, j]]
        better = cand > out
        np.maximum(out, cand, out=out)
        np.copyto(src, neighbors[:, j : j + 1], where=better)
    flat = (src * width + np.arange(width)).ravel()

    def grad(g):
        return np.bincount(flat, weights=g.ravel(), minlength=n * width).reshape(n, width)

    return make_op(out, (h,), (grad,))


# parameter storage ----------------------------------------------------------
class ParamStore:
    """Named groups of float64 parameters with matching gradient slots."""

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._shapes: dict[str, tuple] = {}

    def add(self, name: str, values, shape=None) -> None:
        arr = np.array(values, dtype=np.float64)
        self._shapes[name] = tuple(arr.shape if shape is None else shape)
        self._values[name] = arr.ravel().copy()
        self._grads[name] = np.zeros_like(self._values[name])
        if self._values[name].size != math.prod(self._shapes[name]):
            raise ConfigError(f"group {name}: {arr.size} values do not fit shape {shape}")

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def shape(self, name: str) -> tuple:
        return self._shapes[name]

    def value(self, name: str) -> np.ndarray:
        """Flat view of a parameter group (writes go through)."""
        return self._values[name]

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def set(self, name: str, values) -> None:
        self._values[name][:] = np.asarray(values, dtype=np.float64).ravel()

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g[:] = 0.0

    def tensor(self, name: str, trainable: bool = True) -> Tensor:
        data = self._values[name].reshape(self._shapes[name])
        if not trainable:
            return Tensor(data.copy())
        slot = self._grads[name]

        def sink(g):
            np.add(slot, g.ravel(), out=slot)

        return Tensor(data, requires_grad=True, sink=sink)

    def copy(self) -> "ParamStore":
        other = ParamStore()
        for name in self._values:
            other.add(name, self._values[name], self._shapes[name])
            other._grads[name][:] = self._grads[name]
        return other

    def size(self) -> int:
        return sum(v.size for v in self._values.values())


def _check_finite(params: ParamStore) -> None:
    for name in params:
        if not np.all(np.isfinite(params.grad(name))):
            raise NumericalError(f"non-finite gradient in parameter group '{name}'", name)


def forward_backward(loss_fn: Callable[[ParamStore], Tensor | float], params: ParamStore) -> float:
    """Evaluate ``loss_fn(params)`` and add dLoss/dParam into the gradient slots.

    Gradients accumulate; call ``params.zero_grad()`` first for a fresh step.
    """
    out = loss_fn(params)
    if not isinstance(out, Tensor):
        value = float(out)
        if not math.isfinite(value):
            raise NumericalError("non-finite loss", None)
        return value
    if out.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {out.shape}")
    value = float(out.data.reshape(()))
    if not math.isfinite(value):
        raise NumericalError("non-finite loss", None)
    if out.requires_grad:
        out.backward()
    _check_finite(params)
    return value


def evaluate_loss(loss_fn, params: ParamStore) -> float:
    out = loss_fn(params)
    return float(out.data.reshape(())) if isinstance(out, Tensor) else float(out)


@dataclass
class GradReport:
    step: float
    tolerance: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    passed: dict[str, bool] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())

    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / scale


def finite_diff_check(loss_fn, params: ParamStore, step: float = 1e-5, tolerance: float = 1e-4) -> GradReport:
    """Compare analytic gradients against central differences, element by element."""
    if step <= 0:
        raise ValueError("step must be positive")
    params.zero_grad()
    forward_backward(loss_fn, params)
    report = GradReport(step=step, tolerance=tolerance)
    for name in params:
        analytic = params.grad(name).copy()
        theta = params.value(name)
        numeric = np.zeros_like(theta)
        for i in range(theta.size):
            orig = theta[i]
            theta[i] = orig + step
            up = evaluate_loss(loss_fn, params)
            theta[i] = orig - step
            down = evaluate_loss(loss_fn, params)
            theta[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericalError(f"non-finite loss when perturbing '{name}'[{i}]", name)
            numeric[i] = (up - down) / (2 * step)
        err = float(relative_error(analytic, numeric).max(initial=0.0))
        report.max_rel_error[name] = err
        report.passed[name] = err < tolerance
    params.zero_grad()
    return report


# checkpoints ------------------------------------------------------------------
def save_checkpoint(path, params: ParamStore, meta: dict | None = None) -> None:
    """Text container: header, ``@key value`` metadata, then one group per line pair."""
    lines = [CHECKPOINT_HEADER]
    for key, val in (meta or {}).items():
        lines.append(f"@{key} {val}")
    for name in params:
        shape = "x".join(str(d) for d in params.shape(name)) or "scalar"
        vals = params.value(name)
        lines.append(f"{name} {vals.size} {shape}")
        lines.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0].strip() != CHECKPOINT_HEADER:
        raise ConfigError(f"{path}: not a {CHECKPOINT_HEADER} checkpoint")
    params = ParamStore()
    meta: dict[str, str] = {}
    i = 1
    while i < len(text):
        line = text[i]
        if not line.strip():
            i += 1
            continue
        if line.startswith("@"):
            key, _, val = line[1:].partition(" ")
            meta[key] = val
            i += 1
            continue
        name, length, shape = line.split()
        length = int(length)
        dims = () if shape == "scalar" else tuple(int(d) for d in shape.split("x"))
        raw = text[i + 1].split() if length else []
        if len(raw) != length:
            raise ConfigError(f"{path}:{i + 2}: expected {length} values for '{name}', got {len(raw)}")
        params.add(name, np.array([float(v) for v in raw], dtype=np.float64), dims)
        i += 2
    return params, meta
