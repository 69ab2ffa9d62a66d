"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array and records, for every operation whose
inputs require gradients, a backward closure on an implicit tape (the
graph of ``_parents`` links).  Calling :func:`backward` on a scalar loss
walks that graph in reverse topological order and accumulates gradients
into the ``grad`` slot of every reachable tensor that requires them.
Tensors that do not require gradients never get a ``grad`` allocation.

Compute dtype is float32 for training and evaluation; the gradient
checking utilities build float64 graphs to keep finite-difference noise
below the comparison tolerance.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, DimensionError

__all__ = [
    "Tensor",
    "Parameter",
    "add",
    "sub",
    "mul",
    "matmul",
    "linear",
    "embedding",
    "reshape",
    "transpose",
    "tsum",
    "tmean",
    "texp",
    "tlog",
    "gelu",
    "softmax",
    "layer_norm",
    "cross_entropy",
    "backward",
    "check_gradients",
]


class Tensor:
    """An n-dimensional float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; the free functions do the work.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def transpose(self, axes: Sequence[int]):
        return transpose(self, axes)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


class Parameter(Tensor):
    """A trainable tensor with a group tag and an optional sparsity mask.

    ``requires_grad`` doubles as the trainable flag.  When ``mask`` is
    set (see ``sparsity.enforce_mask``) the optimizer zeroes the masked
    coordinates after every step.
    """

    __slots__ = ("tag", "mask")

    def __init__(self, data, tag: str, trainable: bool = True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.tag = tag
        self.mask: Optional[np.ndarray] = None


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce gradient ``g`` back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(-_unbroadcast(g, b.data.shape))

    return _make(data, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), bwd)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of two tensors (2-D, or stacked with equal batch dims)."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul needs >=2-D operands, got {a.data.ndim}-D and {b.data.ndim}-D")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise DimensionError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        if not (a.data.ndim == 2 and b.data.ndim == 2):
            raise DimensionError(f"matmul batch dimensions disagree: {a.data.shape} x {b.data.shape}")
    data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g @ np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            b._accumulate(np.swapaxes(a.data, -1, -2) @ g)

    return _make(data, (a, b), bwd)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ w.T (+ b)`` for row-major inputs.

    ``x`` has one feature row per token, ``w`` is stored (out, in) so a
    single node covers the transposed product and the bias add.
    """
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(f"linear expects 2-D x and w, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[1]:
        raise DimensionError(f"linear feature mismatch: x {x.data.shape} vs w {w.data.shape}")
    data = x.data @ w.data.T
    if b is not None:
        data += b.data

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g @ w.data)
        if w.requires_grad:
            w._accumulate(g.T @ x.data)
        if b is not None and b.requires_grad:
            b._accumulate(g.sum(axis=0))

    parents = (x, w) if b is None else (x, w, b)
    return _make(data, parents, bwd)


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of ``table`` by integer index array ``idx``."""
    data = table.data[idx]

    def bwd(g):
        if table.requires_grad:
            acc = np.zeros_like(table.data)
            np.add.at(acc, idx, g)
            table._accumulate(acc)

    return _make(data, (table,), bwd)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(data, (a,), bwd)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.transpose(inv))

    return _make(data, (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g, a.data.shape))

    return _make(data, (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    data = np.asarray(a.data.mean(), dtype=a.data.dtype)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.broadcast_to(g / n, a.data.shape))

    return _make(data, (a,), bwd)


def texp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * data)

    return _make(data, (a,), bwd)


def tlog(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(data, (a,), bwd)


_GELU_C = 0.7978845608028654  # sqrt(2/pi)


def gelu(a: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form)."""
    x = a.data
    x2 = x * x
    inner = _GELU_C * (x + 0.044715 * (x * x2))
    t = np.tanh(inner)
    data = 0.5 * x * (1.0 + t)

    def bwd(g):
        if a.requires_grad:
            dinner = _GELU_C * (1.0 + (3 * 0.044715) * x2)
            da = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            a._accumulate(g * da)

    return _make(data, (a,), bwd)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        if a.requires_grad:
            dot = (g * data).sum(axis=-1, keepdims=True)
            a._accumulate((g - dot) * data)

    return _make(data, (a,), bwd)


def layer_norm(x: Tensor, scale: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis with affine scale and bias."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    data = xhat * scale.data + bias.data

    def bwd(g):
        n = x.data.shape[-1]
        if scale.requires_grad:
            scale._accumulate((g * xhat).reshape(-1, n).sum(axis=0))
        if bias.requires_grad:
            bias._accumulate(g.reshape(-1, n).sum(axis=0))
        if x.requires_grad:
            gx = g * scale.data
            a1 = gx.sum(axis=-1, keepdims=True)
            a2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - (a1 + xhat * a2) / n))

    return _make(data, (x, scale, bias), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    ``logits`` is (positions, vocab); the result is a scalar tensor.
    """
    if logits.data.ndim != 2:
        raise DimensionError(f"cross_entropy expects 2-D logits, got {logits.data.shape}")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    e = np.exp(z - zmax)
    se = e.sum(axis=1, keepdims=True)
    logp = (z - zmax) - np.log(se)
    rows = np.arange(z.shape[0])
    data = np.asarray(-logp[rows, targets].mean(), dtype=z.dtype)

    def bwd(g):
        if logits.requires_grad:
            p = e / se
            p[rows, targets] -= 1.0
            logits._accumulate(p * (g / z.shape[0]))

    return _make(data, (logits,), bwd)


def backward(loss: Tensor):
    """Fill ``grad`` for every trainable tensor reachable from ``loss``.

    Gradients accumulate into existing ``grad`` buffers, so calling this
    repeatedly before an optimizer step implements gradient
    accumulation.
    """
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        raise ContractError("backward called on a tensor detached from all trainable inputs")

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    # Intermediate grads are scratch space; free everything non-leaf.
    for node in topo:
        if node._parents:
            node.grad = None
            node._parents = ()
            node._backward = None


def check_gradients(fn, inputs: Sequence[Tensor], h: float = 1e-4) -> float:
    """Compare reverse-mode gradients of ``fn`` against central differences.

    ``fn`` maps the given float64 tensors to a scalar Tensor.  Returns
    the worst relative error over all coordinates of all inputs.
    """
    for t in inputs:
        if t.data.dtype != np.float64:
            raise ContractError("gradient checks run in 64-bit floats")
        t.zero_grad()
    loss = fn(*inputs)
    backward(loss)
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*inputs).item()
            flat[i] = orig - h
            fm = fn(*inputs).item()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * h)
        num = num.reshape(t.data.shape)
        denom = np.maximum(np.abs(analytic) + np.abs(num), 1e-8)
        worst = max(worst, float(np.max(np.abs(analytic - num) / denom)))
    return worst
