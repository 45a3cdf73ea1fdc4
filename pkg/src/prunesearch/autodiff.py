"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is float64 and numpy-backed. Each operation builds a node in a
dynamic graph (closures over the inputs); ``Tensor.backward`` walks the graph
in reverse topological order. Gradients accumulate additively into ``.grad``
until ``zero_grad`` rebinds them to None.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction inside its scope."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class Tensor:
    """Dense N-d float64 array, optionally tracked in a differentiation graph.

    ``_parents`` and ``_vjp`` are set only on op outputs while gradients are
    enabled; ``_vjp(g)`` returns one gradient array (or None) per parent.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not supported; divide by a scalar")
        return mul(self, _as_tensor(1.0 / other))

    def sum(self, axis=None):
        return tsum(self, axis=axis)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    # -- backward pass -----------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable requires_grad tensor.

        Only defined from a scalar. Working gradients are kept separate from
        ``.grad`` so that a second call adds exactly one more copy of the
        gradient (additive accumulation).
        """
        if self.shape != ():
            raise ValueError(f"backward requires a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward on a tensor that does not require grad")

        order = _toposort(self)
        work: dict[int, np.ndarray] = {id(self): np.ones((), dtype=np.float64)}
        for node in reversed(order):
            g = work.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                work[key] = pg if key not in work else work[key] + pg


def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, attaching the graph edge when gradients are on."""
    requires = _grad_enabled and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=requires)
    if requires:
        out._parents = tuple(parents)
        out._vjp = vjp
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise and shape ops ----------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data + b.data
    except ValueError:
        raise ValueError(f"add: shapes {a.shape} and {b.shape} are not broadcastable")
    return _node(data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    try:
        data = a.data * b.data
    except ValueError:
        raise ValueError(f"mul: shapes {a.shape} and {b.shape} are not broadcastable")
    return _node(
        data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log: input must be strictly positive")
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _node(data, (a,), lambda g: (g * data,))


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)
    # subgradient at 0 fixed to 0: mask is strict
    return _node(data, (a,), lambda g: (g * (data > 0.0),))


def tsum(a: Tensor, axis=None) -> Tensor:
    data = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(np.float64),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).astype(np.float64),)

    return _node(data, (a,), vjp)


def tmean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis), _as_tensor(1.0 / n))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def concat(tensors: Sequence[Tensor]) -> Tensor:
    """Concatenate 1-d (or scalar) tensors into one vector."""
    parts = [t.data.reshape(-1) for t in tensors]
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            g[offsets[i] : offsets[i + 1]].reshape(t.shape) for i, t in enumerate(tensors)
        )

    return _node(np.concatenate(parts), tuple(tensors), vjp)


def take(a: Tensor, indices) -> Tensor:
    """Select entries of a 1-d tensor by index (with scatter-add backward)."""
    if a.ndim != 1:
        raise ValueError(f"take expects a 1-d tensor, got shape {a.shape}")
    idx = np.asarray(indices, dtype=np.intp)
    data = a.data[idx]

    def vjp(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _node(data, (a,), vjp)


def pick(a: Tensor, column_indices) -> Tensor:
    """Per-row gather: out[n] = a[n, column_indices[n]]."""
    if a.ndim != 2:
        raise ValueError(f"pick expects a 2-d tensor, got shape {a.shape}")
    cols = np.asarray(column_indices, dtype=np.intp)
    if cols.shape != (a.shape[0],):
        raise ValueError(f"pick: need one column index per row, got {cols.shape}")
    rows = np.arange(a.shape[0])
    data = a.data[rows, cols]

    def vjp(g):
        out = np.zeros_like(a.data)
        out[rows, cols] = g
        return (out,)

    return _node(data, (a,), vjp)


def narrow(a: Tensor, axis: int, length: int) -> Tensor:
    """First ``length`` entries along ``axis``; backward zero-pads."""
    if not 0 < length <= a.shape[axis]:
        raise ValueError(f"narrow: length {length} out of range for axis {axis} of {a.shape}")
    sl = (slice(None),) * axis + (slice(0, length),)

    def vjp(g):
        out = np.zeros_like(a.data)
        out[sl] = g
        return (out,)

    return _node(a.data[sl], (a,), vjp)


# -- softmax family -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _node(s, (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def vjp(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _node(out, (a,), vjp)


# -- linear algebra and network layers ---------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise ValueError(f"matmul: unsupported shapes {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        if b.ndim == 1:
            return (np.outer(g, b.data), a.data.T @ g)
        return (g @ b.data.T, a.data.T @ g)

    return _node(data, (a, b), vjp)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x[N,D] @ weight[K,D].T + bias[K]."""
    if x.ndim != 2 or weight.ndim != 2 or bias.ndim != 1:
        raise ValueError(
            f"linear: expected x[N,D], weight[K,D], bias[K]; got {x.shape}, {weight.shape}, {bias.shape}"
        )
    if x.shape[1] != weight.shape[1] or weight.shape[0] != bias.shape[0]:
        raise ValueError(
            f"linear: incompatible shapes x={x.shape} weight={weight.shape} bias={bias.shape}"
        )
    data = x.data @ weight.data.T + bias.data

    def vjp(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return _node(data, (x, weight, bias), vjp)


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Multi-channel 2-d cross-correlation via im2col.

    x[N, Cin, H, W] with weight[Cout, Cin, KH, KW] gives [N, Cout, H', W'].
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(
            f"conv2d: input has {x.shape[1]} channels but weight expects {weight.shape[1]}"
        )
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: invalid stride {stride} or padding {padding}")
    n, cin, h, w = x.shape
    cout, _, kh, kw = weight.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = np.empty((n, cin, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    out = np.tensordot(cols, weight.data, axes=([1, 2, 3], [1, 2, 3]))  # N,Ho,Wo,Cout
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def vjp(g):
        dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))
        dcols = np.tensordot(weight.data, g, axes=([0], [1]))  # Cin,KH,KW,N,Ho,Wo
        dcols = dcols.transpose(3, 0, 1, 2, 4, 5)
        hp, wp = h + 2 * padding, w + 2 * padding
        dxp = np.zeros((n, cin, hp, wp), dtype=np.float64)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                    :, :, i, j
                ]
        dx = dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp
        return (dx, dw)

    return _node(out, (x, weight), vjp)


@dataclass
class BatchNormState:
    """Per-channel running statistics, mutated by train-mode batch_norm."""

    running_mean: np.ndarray
    running_var: np.ndarray

    @staticmethod
    def create(channels: int) -> "BatchNormState":
        return BatchNormState(np.zeros(channels), np.ones(channels))

    def copy(self) -> "BatchNormState":
        return BatchNormState(self.running_mean.copy(), self.running_var.copy())


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization of x[N,C,H,W].

    Train mode normalizes by biased batch statistics and updates the running
    buffers in ``state``; eval mode uses the running buffers.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm: expected x[N,C,H,W], got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batch_norm: gamma/beta must have shape ({c},), got {gamma.shape}, {beta.shape}"
        )
    if eps <= 0:
        raise ValueError("batch_norm: eps must be positive")
    n, _, h, w = x.shape
    m = n * h * w

    if training:
        if m < 2:
            raise ValueError(f"batch_norm: need at least 2 values per channel in train mode, got {m}")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        state.running_mean = (1.0 - momentum) * state.running_mean + momentum * mean
        state.running_var = (1.0 - momentum) * state.running_var + momentum * var
    else:
        mean = state.running_mean
        var = state.running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def vjp(g):
        dbeta = g.sum(axis=(0, 2, 3))
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = (inv_std[None, :, None, None] / m) * (m * dxhat - s1 - xhat * s2)
        else:
            dx = dxhat * inv_std[None, :, None, None]
        return (dx, dgamma, dbeta)

    return _node(out, (x, gamma, beta), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """Spatial mean: x[N,C,H,W] -> [N,C]."""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool: expected x[N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    data = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).astype(np.float64),)

    return _node(data, (x,), vjp)


def adaptive_avg_pool_axis(x: Tensor, axis: int, target: int) -> Tensor:
    """Adaptive average pooling along one axis.

    Window i covers [floor(i*L/target), ceil((i+1)*L/target)); the backward
    pass distributes each output gradient uniformly over its window.
    """
    length = x.shape[axis]
    if target < 1:
        raise ValueError(f"adaptive_avg_pool_axis: target must be >= 1, got {target}")
    if length == target:
        return x
    xm = np.moveaxis(x.data, axis, 0)
    out_m = np.empty((target,) + xm.shape[1:], dtype=np.float64)
    windows = []
    for i in range(target):
        s = (i * length) // target
        e = -((-(i + 1) * length) // target)  # ceil division
        windows.append((s, e))
        out_m[i] = xm[s:e].mean(axis=0)
    data = np.moveaxis(out_m, 0, axis)

    def vjp(g):
        gm = np.moveaxis(g, axis, 0)
        dxm = np.zeros_like(xm)
        for i, (s, e) in enumerate(windows):
            dxm[s:e] += gm[i] / (e - s)
        return (np.moveaxis(dxm, 0, axis),)

    return _node(data, (x,), vjp)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under the logits."""
    labels = np.asarray(labels)
    k = logits.shape[1]
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must lie in [0, {k}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    return neg(tmean(pick(log_softmax(logits, axis=-1), labels)))
