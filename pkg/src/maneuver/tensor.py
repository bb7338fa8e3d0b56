"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value flowing through the networks is a ``Tensor``: a contiguous
float64 numpy array plus an optional gradient. Operations build a tape of
backward closures; ``Tensor.backward()`` replays it in reverse topological
order. All operations verify their outputs are finite - NaN/Inf is treated
as an error state, never propagated.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NonFiniteError


def _guard_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values produced by '{op}'")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the original operand shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """Float64 n-d array node in an autodiff graph.

    ``requires_grad`` marks trainable leaves; any result touching one keeps
    a backward closure so gradients can flow. Data is row-major and always
    finite.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        _guard_finite(arr, "tensor creation")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents: tuple[Tensor, ...] = ()

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(*shape: int, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape), requires_grad=requires_grad)

    @staticmethod
    def from_op(data: np.ndarray, parents: tuple["Tensor", ...], backward, op: str) -> "Tensor":
        """Wrap an op result, attaching the tape closure when grads are needed.

        ``backward`` receives the output gradient (ndarray) and must push
        contributions into the parents via ``accumulate_grad``.
        """
        out = Tensor.__new__(Tensor)
        out.data = _guard_finite(np.ascontiguousarray(data, dtype=np.float64), op)
        out.grad = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic introspection --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return self.data.item()

    # -- gradient machinery ---------------------------------------------------

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Reverse-mode sweep seeding ``grad`` (ones for a scalar) at self."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() needs an explicit gradient for shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.data.shape).copy()
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                _guard_finite(node.grad, "backward")
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + other.data

        def _bwd(g):
            self.accumulate_grad(_unbroadcast(g, self.data.shape))
            other.accumulate_grad(_unbroadcast(g, other.data.shape))

        return Tensor.from_op(out_data, (self, other), _bwd, "add")

    def __mul__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * other.data

        def _bwd(g):
            self.accumulate_grad(_unbroadcast(g * other.data, self.data.shape))
            other.accumulate_grad(_unbroadcast(g * self.data, other.data.shape))

        return Tensor.from_op(out_data, (self, other), _bwd, "mul")

    def __neg__(self) -> "Tensor":
        def _bwd(g):
            self.accumulate_grad(-g)

        return Tensor.from_op(-self.data, (self,), _bwd, "neg")

    def __sub__(self, other) -> "Tensor":
        other = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-other)

    __radd__ = __add__
    __rmul__ = __mul__

    def scale(self, s: float) -> "Tensor":
        s = float(s)

        def _bwd(g):
            self.accumulate_grad(g * s)

        return Tensor.from_op(self.data * s, (self,), _bwd, "scale")

    def square(self) -> "Tensor":
        def _bwd(g):
            self.accumulate_grad(g * 2.0 * self.data)

        return Tensor.from_op(self.data * self.data, (self,), _bwd, "square")

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape: int) -> "Tensor":
        out_data = self.data.reshape(shape)
        old_shape = self.data.shape

        def _bwd(g):
            self.accumulate_grad(g.reshape(old_shape))

        return Tensor.from_op(out_data, (self,), _bwd, "reshape")

    def flatten(self) -> "Tensor":
        return self.reshape(self.data.size)

    def sum(self, axis: int | tuple[int, ...] | None = None) -> "Tensor":
        if axis is None:
            def _bwd(g):
                self.accumulate_grad(np.full_like(self.data, g.item()))

            return Tensor.from_op(np.asarray(self.data.sum()), (self,), _bwd, "sum")
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        out_data = self.data.sum(axis=axes)

        def _bwd(g):
            self.accumulate_grad(np.broadcast_to(
                np.expand_dims(g, axes), self.data.shape))

        return Tensor.from_op(out_data, (self,), _bwd, "sum")

    def mean(self, axis: int | tuple[int, ...] | None = None) -> "Tensor":
        if axis is None:
            n = self.data.size

            def _bwd(g):
                self.accumulate_grad(np.full_like(self.data, g.item() / n))

            return Tensor.from_op(np.asarray(self.data.mean()), (self,), _bwd, "mean")
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([self.data.shape[a] for a in axes]))
        out_data = self.data.mean(axis=axes)

        def _bwd(g):
            self.accumulate_grad(np.broadcast_to(
                np.expand_dims(g, axes), self.data.shape) / n)

        return Tensor.from_op(out_data, (self,), _bwd, "mean")


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back to each operand."""
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def _bwd(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t.accumulate_grad(g[tuple(sl)])

    return Tensor.from_op(data, tuple(tensors), _bwd, "concat")


def stack(tensors: list[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in tensors], axis=axis)

    def _bwd(g):
        for i, t in enumerate(tensors):
            t.accumulate_grad(np.take(g, i, axis=axis))

    return Tensor.from_op(data, tuple(tensors), _bwd, "stack")


# -- pointwise nonlinearities --------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise logistic function, computed overflow-free."""
    d = x.data
    out_data = np.empty_like(d)
    pos = d >= 0
    out_data[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ed = np.exp(d[~pos])
    out_data[~pos] = ed / (1.0 + ed)

    def _bwd(g):
        x.accumulate_grad(g * out_data * (1.0 - out_data))

    return Tensor.from_op(out_data, (x,), _bwd, "sigmoid")


def tanh(x: Tensor) -> Tensor:
    out_data = np.tanh(x.data)

    def _bwd(g):
        x.accumulate_grad(g * (1.0 - out_data * out_data))

    return Tensor.from_op(out_data, (x,), _bwd, "tanh")


def relu(x: Tensor) -> Tensor:
    out_data = np.maximum(x.data, 0.0)

    def _bwd(g):
        x.accumulate_grad(g * (x.data > 0.0))

    return Tensor.from_op(out_data, (x,), _bwd, "relu")


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; both operands must have identical shapes."""
    if a.shape != b.shape:
        raise DimensionError(f"hadamard operands differ: {a.shape} vs {b.shape}")
    return a * b


# -- classification head math ---------------------------------------------------


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by max subtraction.

    Accepts a vector or a batch of row vectors.
    """
    if x.data.shape[-1] < 2:
        raise DimensionError(f"softmax needs >= 2 classes, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def _bwd(g):
        dot = (g * out_data).sum(axis=-1, keepdims=True)
        x.accumulate_grad(out_data * (g - dot))

    return Tensor.from_op(out_data, (x,), _bwd, "softmax")


def cross_entropy(probs: Tensor, label, class_weights=None) -> Tensor:
    """Weighted negative log-likelihood of the true class.

    ``probs`` is a probability vector (or a batch of them, with one label
    per row; the batch reduces to the weighted mean). ``class_weights``
    defaults to all ones.
    """
    p = probs.data
    if p.ndim == 1:
        p2 = p[None, :]
        labels = np.asarray([label], dtype=np.int64)
    else:
        p2 = p
        labels = np.asarray(label, dtype=np.int64)
    n, c = p2.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if ((labels < 0) | (labels >= c)).any():
        raise DimensionError(f"label out of range [0, {c})")
    w = np.ones(c) if class_weights is None else np.asarray(class_weights, dtype=np.float64)
    if w.shape != (c,):
        raise DimensionError(f"class_weights shape {w.shape} does not match {c} classes")
    rows = np.arange(n)
    picked = np.clip(p2[rows, labels], 1e-300, None)
    losses = -w[labels] * np.log(picked)
    out_data = np.asarray(losses.mean())

    def _bwd(g):
        gp = np.zeros_like(p2)
        gp[rows, labels] = -w[labels] / picked * (g.item() / n)
        probs.accumulate_grad(gp.reshape(p.shape))

    return Tensor.from_op(out_data, (probs,), _bwd, "cross_entropy")
