"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything is CPU numpy under the hood. A Tensor wraps one C-contiguous
float64 ndarray; operations build a tape of backward closures which
``Tensor.backward`` replays in reverse topological order. Gradients
accumulate (+=) until cleared, so a graph can be backed through several
times, and two forward passes sharing parameters (e.g. a pruned pass and a
full pass) sum their contributions.

A process-wide multiply counter can be armed with ``count_flops()``: while
active, every matmul adds 2*m*k*n FLOPs per batch element (MAC = 2
convention) and every GeLU adds one FLOP per element. Nothing else counts,
which is exactly the accounting the analytical efficiency model uses.
"""

from __future__ import annotations

import contextlib
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)

_grad_enabled = True
_counter: "FlopCounter | None" = None


class FlopCounter:
    """Running multiply count; armed via count_flops()."""

    __slots__ = ("matmul", "gelu")

    def __init__(self) -> None:
        self.matmul = 0
        self.gelu = 0

    @property
    def total(self) -> int:
        return self.matmul + self.gelu


@contextlib.contextmanager
def count_flops():
    """Arm the global FLOPs counter for the duration of the block."""
    global _counter
    prev, _counter = _counter, FlopCounter()
    try:
        yield _counter
    finally:
        _counter = prev


@contextlib.contextmanager
def no_grad():
    """Disable graph construction (forward values only)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape`, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Tensor:
    """A float64 ndarray plus optional gradient bookkeeping.

    data is row-major float64; grad, when populated by backward(), always
    matches data's shape. Tensors are treated as immutable once produced by
    an op; only optimizer steps mutate leaf .data in place.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._bwd = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def _result(data: np.ndarray, parents: Sequence["Tensor"], bwd) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._bwd = bwd
        return out

    def _accum(self, g: np.ndarray) -> None:
        # Accumulation is never in place, so sharing g with another node is safe.
        self.grad = g if self.grad is None else self.grad + g

    # -- basics ---------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data + o.data

        def bwd(g, a=self, b=o):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.data.shape))

        return Tensor._result(out_data, (self, o), bwd)

    __radd__ = __add__

    def __mul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data * o.data

        def bwd(g, a=self, b=o):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._result(out_data, (self, o), bwd)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        return self + (-o)

    def __rsub__(self, other):
        return Tensor(other) + (-self)

    def __truediv__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        out_data = self.data / o.data

        def bwd(g, a=self, b=o, y=out_data):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.data.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * y / b.data, b.data.shape))

        return Tensor._result(out_data, (self, o), bwd)

    def __pow__(self, p):
        assert isinstance(p, (int, float)), "only scalar exponents"
        out_data = self.data ** p

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g * p * a.data ** (p - 1))

        return Tensor._result(out_data, (self,), bwd)

    def __matmul__(self, other):
        o = other if isinstance(other, Tensor) else Tensor(other)
        a, b = self.data, o.data
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError(f"matmul needs >=2-d operands, got {a.shape} @ {b.shape}")
        if a.shape[-1] != b.shape[-2]:
            raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
        out_data = a @ b
        if _counter is not None:
            batch = int(np.prod(out_data.shape[:-2], initial=1))
            _counter.matmul += 2 * batch * out_data.shape[-2] * a.shape[-1] * out_data.shape[-1]

        def bwd(g, ta=self, tb=o):
            if ta.requires_grad:
                ta._accum(_unbroadcast(g @ np.swapaxes(tb.data, -1, -2), ta.data.shape))
            if tb.requires_grad:
                a = ta.data
                if tb.data.ndim == 2 and g.ndim > 2:
                    # batched input x 2-d weight: contract batch dims in one
                    # GEMM instead of materializing per-batch weight grads
                    k = a.shape[-1]
                    tb._accum(a.reshape(-1, k).T @ g.reshape(-1, g.shape[-1]))
                else:
                    tb._accum(_unbroadcast(np.swapaxes(a, -1, -2) @ g, tb.data.shape))

        return Tensor._result(out_data, (self, o), bwd)

    # -- shape ops ------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(g.reshape(a.data.shape))

        return Tensor._result(out_data, (self,), bwd)

    def transpose(self, axes: Sequence[int]):
        axes = tuple(axes)
        out_data = np.transpose(self.data, axes)
        inv = tuple(np.argsort(axes))

        def bwd(g, a=self, inv=inv):
            if a.requires_grad:
                a._accum(np.transpose(g, inv))

        return Tensor._result(out_data, (self,), bwd)

    @property
    def mT(self):
        """Swap the last two axes."""
        out_data = np.swapaxes(self.data, -1, -2)

        def bwd(g, a=self):
            if a.requires_grad:
                a._accum(np.swapaxes(g, -1, -2))

        return Tensor._result(out_data, (self,), bwd)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bwd(g, a=self, key=key):
            if a.requires_grad:
                buf = np.zeros_like(a.data)
                np.add.at(buf, key, g)
                a._accum(buf)

        return Tensor._result(out_data, (self,), bwd)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bwd(g, a=self, axis=axis, keepdims=keepdims):
            if not a.requires_grad:
                return
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape))

        return Tensor._result(out_data, (self,), bwd)

    def mean(self, axis=None, keepdims: bool = False):
        out_data = self.data.mean(axis=axis, keepdims=keepdims)
        n = self.data.size / max(out_data.size, 1)

        def bwd(g, a=self, axis=axis, keepdims=keepdims, n=n):
            if not a.requires_grad:
                return
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a._accum(np.broadcast_to(g, a.data.shape) / n)

        return Tensor._result(out_data, (self,), bwd)

    # -- backward -------------------------------------------------------------

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into .grad fields."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)


# -- elementwise primitives ----------------------------------------------------


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def bwd(g, a=x, y=out_data):
        if a.requires_grad:
            a._accum(g * y)

    return Tensor._result(out_data, (x,), bwd)


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def bwd(g, a=x):
        if a.requires_grad:
            a._accum(g / a.data)

    return Tensor._result(out_data, (x,), bwd)


def sqrt(x: Tensor) -> Tensor:
    out_data = np.sqrt(x.data)

    def bwd(g, a=x, y=out_data):
        if a.requires_grad:
            a._accum(g * 0.5 / y)

    return Tensor._result(out_data, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    out_data = expit(x.data)

    def bwd(g, a=x, y=out_data):
        if a.requires_grad:
            a._accum(g * y * (1.0 - y))

    return Tensor._result(out_data, (x,), bwd)


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian-CDF GeLU: x * Phi(x) with Phi from erf."""
    phi_cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out_data = x.data * phi_cdf
    if _counter is not None:
        _counter.gelu += x.data.size

    def bwd(g, a=x, cdf=phi_cdf):
        if a.requires_grad:
            pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT_2PI
            a._accum(g * (cdf + a.data * pdf))

    return Tensor._result(out_data, (x,), bwd)


# -- softmax family --------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-stabilized softmax along `axis`."""
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g, a=x, y=out_data, axis=axis):
        if a.requires_grad:
            a._accum(y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return Tensor._result(out_data, (x,), bwd)


def masked_softmax(x: Tensor, mask: Tensor | None, axis: int = -1) -> Tensor:
    """Softmax whose numerators are scaled by `mask` before normalization.

    mask broadcasts against x and must leave at least one strictly positive
    weight per row (the caller guarantees this via never-pruned CLS keys).
    Differentiable in both the scores and the mask, so learned gates can be
    trained through attention. mask=None is the plain softmax.
    """
    if mask is None:
        return softmax(x, axis=axis)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    w = e * mask.data
    s = w.sum(axis=axis, keepdims=True)
    out_data = w / s

    def bwd(g, a=x, m=mask, y=out_data, e=e, s=s, axis=axis):
        gy = (g * y).sum(axis=axis, keepdims=True)
        if a.requires_grad:
            a._accum(y * (g - gy))
        if m.requires_grad:
            m._accum(_unbroadcast(e / s * (g - gy), m.data.shape))

    return Tensor._result(out_data, (x, mask), bwd)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bwd(g, a=x, y=out_data, axis=axis):
        if a.requires_grad:
            a._accum(g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return Tensor._result(out_data, (x,), bwd)


# -- normalization ----------------------------------------------------------------


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if x.data.shape[-1] < 1:
        raise ValueError("layer_norm needs a non-empty last axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv_std
    out_data = xhat * gain.data + bias.data

    def bwd(g, a=x, gn=gain, bs=bias, xhat=xhat, inv_std=inv_std):
        if gn.requires_grad:
            gn._accum(_unbroadcast(g * xhat, gn.data.shape))
        if bs.requires_grad:
            bs._accum(_unbroadcast(g, bs.data.shape))
        if a.requires_grad:
            gx = g * gn.data
            a._accum(inv_std * (gx - gx.mean(axis=-1, keepdims=True)
                                - xhat * (gx * xhat).mean(axis=-1, keepdims=True)))

    return Tensor._result(out_data, (x, gain, bias), bwd)


# -- structure ops -----------------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = -1) -> Tensor:
    ts = list(tensors)
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g, ts=ts, offsets=offsets, axis=axis):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return Tensor._result(out_data, ts, bwd)


def take_tokens(x: Tensor, indices: np.ndarray) -> Tensor:
    """Gather along the token axis (axis -2): x[..., indices, :]."""
    out_data = x.data[..., indices, :]

    def bwd(g, a=x, indices=indices):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, (..., indices, slice(None)), g)
            a._accum(buf)

    return Tensor._result(out_data, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup table[ids]; duplicate ids accumulate gradient."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding id out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    return table[ids]


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return a @ b
