"""A small tape-based reverse-mode autodiff engine over numpy arrays.

Every differentiable operation is a method on :class:`Graph`. The graph records
nodes in execution order, so the tape is already topologically sorted and
:func:`backward` simply walks it in reverse.

    g = Graph()
    y = g.relu(g.matmul(x, w))
    loss = g.sum(g.mul(y, y))
    backward(loss, g)
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateFeatureError, LabelError, ShapeError

NORM_EPS = 1e-8


class Tensor:
    """An n-d array with an optional gradient buffer.

    ``values`` keeps its numpy shape; ``grad`` is allocated lazily by
    :func:`backward` and accumulated with ``+=``.
    """

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, dtype=np.float32, name: str | None = None):
        self.values = np.asarray(values, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.values = values
        t.grad = None
        t.requires_grad = requires_grad
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.values)
        else:
            self.grad.fill(0)

    def item(self) -> float:
        return float(self.values.reshape(()))

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, dtype={self.values.dtype}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    # maps output grad -> one grad (or None) per input
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] = field(repr=False)


def _values(x):
    return x.values if isinstance(x, Tensor) else x


class Graph:
    """Operation tape for one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []

    def _emit(self, kind, inputs, values, backward_fn) -> Tensor:
        needs = any(t.requires_grad for t in inputs)
        out = Tensor._wrap(values, needs)
        if needs:
            self.nodes.append(Node(kind, tuple(inputs), out, backward_fn))
        return out

    # -- elementwise -------------------------------------------------------

    def elementwise(self, kind: str, a: Tensor, b=None) -> Tensor:
        ops = {"add": self.add, "sub": self.sub, "mul": self.mul, "scale": self.scale}
        if kind == "relu":
            return self.relu(a)
        if kind not in ops:
            raise ValueError(f"unknown elementwise kind {kind!r}")
        return ops[kind](a, b)

    @staticmethod
    def _check_same(a: Tensor, b: Tensor, kind: str) -> None:
        if a.shape != b.shape:
            raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} differ")

    def add(self, a: Tensor, b) -> Tensor:
        if not isinstance(b, Tensor):
            return self._emit("add", (a,), a.values + b, lambda g: (g,))
        self._check_same(a, b, "add")
        return self._emit("add", (a, b), a.values + b.values, lambda g: (g, g))

    def sub(self, a: Tensor, b) -> Tensor:
        if not isinstance(b, Tensor):
            return self._emit("sub", (a,), a.values - b, lambda g: (g,))
        self._check_same(a, b, "sub")
        return self._emit("sub", (a, b), a.values - b.values, lambda g: (g, -g))

    def mul(self, a: Tensor, b) -> Tensor:
        if not isinstance(b, Tensor):
            return self.scale(a, b)
        self._check_same(a, b, "mul")
        av, bv = a.values, b.values
        return self._emit("mul", (a, b), av * bv, lambda g: (g * bv, g * av))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit("scale", (a,), a.values * a.values.dtype.type(c), lambda g: (g * g.dtype.type(c),))

    def relu(self, a: Tensor) -> Tensor:
        mask = a.values > 0
        return self._emit("relu", (a,), np.where(mask, a.values, 0).astype(a.values.dtype), lambda g: (g * mask,))

    # -- reductions --------------------------------------------------------

    def sum(self, a: Tensor) -> Tensor:
        shape = a.shape
        return self._emit("sum", (a,), a.values.sum(dtype=a.values.dtype),
                          lambda g: (np.broadcast_to(g, shape).copy(),))

    def mean(self, a: Tensor) -> Tensor:
        return self.scale(self.sum(a), 1.0 / a.size)

    def reshape(self, a: Tensor, shape) -> Tensor:
        old = a.shape
        out = a.values.reshape(shape)
        if out.size != a.size:
            raise ShapeError(f"reshape: cannot view {old} as {shape}")
        return self._emit("reshape", (a,), out, lambda g: (g.reshape(old),))

    def rows(self, a: Tensor, start: int, stop: int) -> Tensor:
        """Slice ``a[start:stop]`` along the leading axis."""
        shape = a.shape

        def back(g):
            full = np.zeros(shape, dtype=g.dtype)
            full[start:stop] = g
            return (full,)

        return self._emit("rows", (a,), a.values[start:stop].copy(), back)

    # -- linear algebra ----------------------------------------------------

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
        av, bv = a.values, b.values
        return self._emit("matmul", (a, b), av @ bv, lambda g: (g @ bv.T, av.T @ g))

    def bias_add(self, x: Tensor, b: Tensor) -> Tensor:
        """Add a [D] bias to every row of an [N, D] tensor."""
        if x.values.ndim != 2 or b.shape != (x.shape[1],):
            raise ShapeError(f"bias_add: bias {b.shape} does not fit {x.shape}")
        return self._emit("bias_add", (x, b), x.values + b.values, lambda g: (g, g.sum(axis=0)))

    def linear(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        return self.bias_add(self.matmul(x, w), b)

    # -- video ops ---------------------------------------------------------

    def conv3d(self, x: Tensor, kernel: Tensor, bias: Tensor, stride=(1, 1, 1)) -> Tensor:
        """Valid (unpadded) 3-D cross-correlation, NCTHW layout."""
        if x.values.ndim != 5 or kernel.values.ndim != 5:
            raise ShapeError(f"conv3d: expected 5-d input and kernel, got {x.shape}, {kernel.shape}")
        n, c, T, H, W = x.shape
        k, kc, t, h, w = kernel.shape
        if kc != c:
            raise ShapeError(f"conv3d: kernel expects {kc} channels, input has {c}")
        if bias.shape != (k,):
            raise ShapeError(f"conv3d: bias shape {bias.shape} != ({k},)")
        if t > T or h > H or w > W:
            raise ShapeError(f"conv3d: kernel {(t, h, w)} larger than input {(T, H, W)}")
        sT, sH, sW = (int(s) for s in stride)
        if min(sT, sH, sW) < 1:
            raise ShapeError(f"conv3d: strides must be >= 1, got {stride}")
        To, Ho, Wo = (T - t) // sT + 1, (H - h) // sH + 1, (W - w) // sW + 1

        win = sliding_window_view(x.values, (t, h, w), axis=(2, 3, 4))[:, :, ::sT, ::sH, ::sW]
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(n * To * Ho * Wo, c * t * h * w)
        kmat = kernel.values.reshape(k, -1)
        out = cols @ kmat.T + bias.values
        out = np.ascontiguousarray(out.reshape(n, To, Ho, Wo, k).transpose(0, 4, 1, 2, 3))

        def back(g):
            gmat = g.transpose(0, 2, 3, 4, 1).reshape(-1, k)
            dk = (gmat.T @ cols).reshape(kernel.shape)
            db = gmat.sum(axis=0)
            dx = None
            if x.requires_grad:
                dcols = (gmat @ kmat).reshape(n, To, Ho, Wo, c, t, h, w)
                dcols = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
                dx = np.zeros(x.shape, dtype=g.dtype)
                for dt in range(t):
                    for dh in range(h):
                        for dw in range(w):
                            dx[:, :,
                               dt:dt + sT * (To - 1) + 1:sT,
                               dh:dh + sH * (Ho - 1) + 1:sH,
                               dw:dw + sW * (Wo - 1) + 1:sW] += dcols[..., dt, dh, dw]
            return dx, dk, db

        return self._emit("conv3d", (x, kernel, bias), out, back)

    def global_avg_pool(self, x: Tensor) -> Tensor:
        if x.values.ndim != 5:
            raise ShapeError(f"global_avg_pool: expected NCTHW, got {x.shape}")
        shape = x.shape
        count = shape[2] * shape[3] * shape[4]

        def back(g):
            return (np.broadcast_to((g / g.dtype.type(count))[:, :, None, None, None], shape).copy(),)

        return self._emit("global_avg_pool", (x,), x.values.mean(axis=(2, 3, 4), dtype=x.values.dtype), back)

    # -- feature ops -------------------------------------------------------

    def l2_normalize(self, v: Tensor) -> Tensor:
        if v.values.ndim != 2:
            raise ShapeError(f"l2_normalize: expected [N, D], got {v.shape}")
        norm = np.sqrt((v.values * v.values).sum(axis=1, keepdims=True))
        if np.any(norm < NORM_EPS):
            bad = np.flatnonzero(norm[:, 0] < NORM_EPS).tolist()
            raise DegenerateFeatureError(f"rows {bad} have norm below {NORM_EPS}")
        y = v.values / norm

        def back(g):
            return ((g - y * (y * g).sum(axis=1, keepdims=True)) / norm,)

        return self._emit("l2_normalize", (v,), y, back)

    def cross_entropy(self, logits: Tensor, labels) -> Tensor:
        """Mean softmax cross-entropy of [N, M] logits against integer labels."""
        labels = np.asarray(labels)
        if logits.values.ndim != 2 or labels.shape != (logits.shape[0],):
            raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
        n, m = logits.shape
        if labels.size and (labels.min() < 0 or labels.max() >= m):
            raise LabelError(f"labels must lie in [0, {m}), got range [{labels.min()}, {labels.max()}]")
        z = logits.values - logits.values.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        rows = np.arange(n)
        loss = -logp[rows, labels].mean(dtype=logits.values.dtype)

        def back(g):
            d = np.exp(logp)
            d[rows, labels] -= 1
            return (d * (g / g.dtype.type(n)),)

        return self._emit("cross_entropy", (logits,), np.asarray(loss, dtype=logits.values.dtype), back)


def detach(v: Tensor) -> Tensor:
    """Same values, cut from the graph: nothing upstream receives gradient."""
    return Tensor._wrap(v.values, False)


def backward(loss: Tensor, graph: Graph) -> None:
    """Populate ``grad`` for every tensor reachable from ``loss`` that requires it."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not any(node.output is loss for node in graph.nodes):
        raise ValueError("loss was not produced by this graph")
    if loss.grad is None:
        loss.grad = np.zeros_like(loss.values)
    loss.grad += 1
    for node in reversed(graph.nodes):
        g = node.output.grad
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.grad is None:
                inp.grad = np.zeros_like(inp.values)
            inp.grad += gi.reshape(inp.shape).astype(inp.values.dtype, copy=False)
