"""Dense tensors with define-by-run reverse-mode differentiation on a numpy backend.

Every op records its parents and a closure mapping the upstream gradient to
one gradient per parent. ``backward`` walks the recorded graph in reverse
topological order. The whole project runs in a single float width
(``DTYPE``) so gradient checks stay meaningful.

Replicas: under ``no_grad`` a tensor may carry ``rep = R > 0``, meaning its
buffer holds R stacked variants along an extra leading axis that is hidden
from ``shape``. Ops broadcast replicas through a forward pass, which lets the
finite-difference checker evaluate many perturbed parameter values at once.
"""

from __future__ import annotations

import itertools
import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_node_ids = itertools.count()
_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (sampling, evaluation)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "id", "name", "cache", "rep")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.id = next(_node_ids)
        self.name = name
        self.cache = None
        self.rep = 0

    @property
    def shape(self) -> tuple[int, ...]:
        if self.rep and not isinstance(self.cache, SparseReplicas):
            return self.data.shape[1:]
        return self.data.shape

    @property
    def ndim(self) -> int:
        return len(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

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

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], fn, rep: int = 0) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.id = next(_node_ids)
    out.name = ""
    out.cache = None
    out.rep = rep
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# -- replica plumbing (forward only) -----------------------------------------


def _reps(*ts: Tensor) -> int:
    r = 0
    for t in ts:
        if t is not None and t.rep:
            if r and t.rep != r:
                raise ValueError(f"replica count mismatch: {r} vs {t.rep}")
            r = t.rep
    if r and _grad_enabled:
        raise RuntimeError("replicated tensors are only supported under no_grad()")
    return r


class SparseReplicas:
    """Replicas that differ from ``base`` in one entry each: replica q has
    ``base.flat[index[q]] += delta[q]``. Stored on ``Tensor.cache`` of a
    parameter whose ``data`` stays the unreplicated base."""

    def __init__(self, base: np.ndarray, index: np.ndarray, delta: np.ndarray):
        self.base, self.index, self.delta = base, index, delta

    def dense(self) -> np.ndarray:
        r = len(self.index)
        out = np.broadcast_to(self.base.reshape(-1), (r, self.base.size)).copy()
        out[np.arange(r), self.index] += self.delta
        return out.reshape((r,) + self.base.shape)


def _phys(t: Tensor) -> np.ndarray:
    return t.cache.dense() if isinstance(t.cache, SparseReplicas) else t.data


def _lift(t: Tensor, ndim: int, r: int) -> np.ndarray:
    """Physical buffer of ``t`` aligned for an op with logical rank ``ndim`` over ``r`` replicas."""
    if not t.rep:
        return t.data
    pad = ndim - t.ndim
    d = _phys(t)
    return d.reshape((r,) + (1,) * pad + t.shape) if pad > 0 else d


def _full(t: Tensor, r: int) -> np.ndarray:
    """Buffer with an explicit replica axis (broadcast if ``t`` is not replicated)."""
    if t.rep:
        return _phys(t)
    return np.broadcast_to(t.data, (r,) + t.data.shape)


def _rep_binary(op, a: Tensor, b: Tensor, r: int) -> Tensor:
    n = max(a.ndim, b.ndim)
    return _make(op(_lift(a, n, r), _lift(b, n, r)), (), None, r)


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    r = _reps(a, b)
    if r:
        return _rep_binary(np.add, a, b, r)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    r = _reps(a, b)
    if r:
        return _rep_binary(np.subtract, a, b, r)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    r = _reps(a, b)
    if r:
        return _rep_binary(np.multiply, a, b, r)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    r = _reps(a, b)
    if r:
        return _rep_binary(np.divide, a, b, r)
    ad, bd = a.data, b.data
    out = ad / bd

    def fn(g):
        return unbroadcast(g / bd, ad.shape), unbroadcast(-g * out / bd, bd.shape)

    return _make(out, (a, b), fn)


# Unary elementwise ops act on the physical buffer directly, so replicas pass through.


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), a.rep)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(ad**p, (a,), lambda g: (g * p * ad ** (p - 1),), a.rep)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), a.rep)


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,), a.rep)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), a.rep)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), a.rep)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid(a.data)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),), a.rep)


def relu(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),), a.rep)


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return _make(x * s, (a,), lambda g: (g * (s * (1.0 + x * (1.0 - s))),), a.rep)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a) -> Tensor:
    """GELU, tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    th = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    out = 0.5 * x * (1.0 + th)

    def fn(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du),)

    return _make(out, (a,), fn, a.rep)


def mish(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    th = np.tanh(np.logaddexp(0.0, x))

    def fn(g):
        return (g * (th + x * (1.0 - th * th) * _sigmoid(x)),)

    return _make(x * th, (a,), fn, a.rep)


# -- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")
    r = _reps(a, b)
    if r:
        return _rep_binary(np.matmul, a, b, r)
    ad, bd = a.data, b.data

    def fn(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(ad @ bd, (a, b), fn)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` of shape [in, out]."""
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    r = _reps(x, w, b)
    if r and isinstance(w.cache, SparseReplicas):
        return _linear_sparse(x, w, b, r)
    if r:
        n = max(x.ndim, 2)
        out = _lift(x, n, r) @ _lift(w, n, r)
        if b is not None:
            out = out + _lift(b, n, r)
        return _make(out, (), None, r)
    xd, wd = x.data, w.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(lead + (wd.shape[1],))
    if b is not None:
        out += b.data
        parents = (x, w, b)
    else:
        parents = (x, w)

    def fn(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _make(out, parents, fn)


def _linear_sparse(x: Tensor, w: Tensor, b, r: int) -> Tensor:
    # replica q perturbs w[i_q, j_q]: its output column j_q moves by delta_q * x[..., i_q]
    sp = w.cache
    n_in, n_out = sp.base.shape
    X = _full(x, r)
    out = (X @ sp.base).copy() if x.rep else np.broadcast_to(x.data @ sp.base, (r,) + x.shape[:-1] + (n_out,)).copy()
    rows, cols = np.divmod(sp.index, n_out)
    q = np.arange(r)
    xi = X.reshape(r, -1, n_in)[q, :, rows]  # [r, M]
    flat = out.reshape(r, -1, n_out)
    flat[q, :, cols] += sp.delta[:, None] * xi
    if b is not None:
        out = out + _lift(b, x.ndim, r)
    return _make(out, (), None, r)


# -- reductions and shape ops -------------------------------------------------


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    if a.rep:
        return _make(np.sum(a.data, axis=tuple(x + 1 for x in axes), keepdims=keepdims), (), None, a.rep)

    def fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), fn)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    if a.rep:
        return _make(a.data.reshape((a.rep,) + shape), (), None, a.rep)
    src = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(x % a.ndim for x in axes)
    if a.rep:
        return _make(np.transpose(a.data, (0,) + tuple(x + 1 for x in axes)), (), None, a.rep)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if a.rep:
        items = idx if isinstance(idx, tuple) else (idx,)
        return _make(a.data[(slice(None),) + items], (), None, a.rep)
    shape = a.shape
    basic = _is_basic_index(idx)

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return _make(a.data[idx], (a,), fn)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    axis = axis % ts[0].ndim
    r = _reps(*ts)
    if r:
        return _make(np.concatenate([_full(t, r) for t in ts], axis=axis + 1), (), None, r)
    splits = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _make(np.concatenate([t.data for t in ts], axis=axis), ts, lambda g: tuple(np.split(g, splits, axis=axis)))


def repeat(a, repeats: int, axis: int) -> Tensor:
    """Repeat each element ``repeats`` times along ``axis`` (nearest upsampling)."""
    a = as_tensor(a)
    shape = a.shape
    ax = axis % a.ndim
    if a.rep:
        return _make(np.repeat(a.data, repeats, axis=ax + 1), (), None, a.rep)

    def fn(g):
        gs = g.reshape(shape[:ax] + (shape[ax], repeats) + shape[ax + 1 :])
        return (gs.sum(axis=ax + 1),)

    return _make(np.repeat(a.data, repeats, axis=ax), (a,), fn)


def where(mask: np.ndarray, a, b) -> Tensor:
    """Elementwise select with a constant boolean mask."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(mask, dtype=bool)
    r = _reps(a, b)
    if r:
        n = max(a.ndim, b.ndim, m.ndim)
        return _make(np.where(m, _lift(a, n, r), _lift(b, n, r)), (), None, r)
    sa, sb = a.shape, b.shape
    return _make(
        np.where(m, a.data, b.data),
        (a, b),
        lambda g: (unbroadcast(np.where(m, g, 0.0), sa), unbroadcast(np.where(m, 0.0, g), sb)),
    )


# -- neural-network primitives ------------------------------------------------


def _softmax(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    if a.rep:
        return _make(_softmax(a.data, axis % a.ndim + 1), (), None, a.rep)
    out = _softmax(a.data, axis)

    def fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), fn)


def _standardize(x: np.ndarray, eps: float):
    n = x.shape[-1]
    xc = x - x.sum(axis=-1, keepdims=True) * (1.0 / n)
    var = (xc * xc).sum(axis=-1, keepdims=True) * (1.0 / n)
    rstd = 1.0 / np.sqrt(var + eps)
    return xc * rstd, rstd


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; optional affine ``weight``/``bias``."""
    x = as_tensor(x)
    weight = as_tensor(weight) if weight is not None else None
    bias = as_tensor(bias) if bias is not None else None
    r = _reps(x, weight, bias)
    if r:
        out, _ = _standardize(x.data, eps)
        n = x.ndim
        if weight is not None:
            out = out * _lift(weight, n, r)
        if bias is not None:
            out = out + _lift(bias, n, r)
        return _make(out, (), None, r)
    xhat, rstd = _standardize(x.data, eps)
    out = xhat
    parents = [x]
    wd = None
    if weight is not None:
        wd = weight.data
        out = out * wd
        parents.append(weight)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def fn(g):
        gh = g * wd if wd is not None else g
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        red = tuple(range(g.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=red))
        if bias is not None:
            grads.append(g.sum(axis=red))
        return tuple(grads)

    return _make(out, tuple(parents), fn)


def group_norm(x, groups: int, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Group normalization for [B, C, L] inputs; affine params have shape [C]."""
    x = as_tensor(x)
    weight = as_tensor(weight) if weight is not None else None
    bias = as_tensor(bias) if bias is not None else None
    B, C, L = x.shape
    if C % groups:
        raise ValueError(f"channels {C} not divisible by groups {groups}")
    r = _reps(x, weight, bias)
    if r:
        xd = _full(x, r)
        xhat, _ = _standardize(xd.reshape(r, B, groups, -1), eps)
        out = xhat.reshape(r, B, C, L)
        if weight is not None:
            out = out * _full(weight, r).reshape(r, 1, C, 1)
        if bias is not None:
            out = out + _full(bias, r).reshape(r, 1, C, 1)
        return _make(out, (), None, r)
    xhat_g, rstd = _standardize(x.data.reshape(B, groups, -1), eps)
    xhat = xhat_g.reshape(B, C, L)
    out = xhat
    parents = [x]
    wd = None
    if weight is not None:
        wd = weight.data[None, :, None]
        out = out * wd
        parents.append(weight)
    if bias is not None:
        out = out + bias.data[None, :, None]
        parents.append(bias)

    def fn(g):
        gh = (g * wd if wd is not None else g).reshape(B, groups, -1)
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat_g * (gh * xhat_g).mean(axis=-1, keepdims=True))
        grads = [gx.reshape(B, C, L)]
        if weight is not None:
            grads.append((g * xhat).sum(axis=(0, 2)))
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return _make(out, tuple(parents), fn)


def _im2col(x: np.ndarray, K: int) -> np.ndarray:
    """[N, Cin, L] -> [N, L, Cin*K] windows of a zero-padded signal."""
    N, Cin, L = x.shape
    if K == 1:
        return x.transpose(0, 2, 1)
    pad = K // 2
    xp = np.zeros((N, Cin, L + 2 * pad), dtype=DTYPE)
    xp[:, :, pad : pad + L] = x
    cols = np.empty((N, L, Cin, K), dtype=DTYPE)
    for k in range(K):
        cols[:, :, :, k] = xp[:, :, k : k + L].transpose(0, 2, 1)
    return cols.reshape(N, L, Cin * K)


def conv1d(x, w, b=None) -> Tensor:
    """Stride-1 convolution with "same" zero padding.

    x: [B, Cin, L]; w: [Cout, Cin, K] with K odd; b: [Cout].
    """
    x, w = as_tensor(x), as_tensor(w)
    b = as_tensor(b) if b is not None else None
    B, Cin, L = x.shape
    Cout, Cin_w, K = w.shape
    if Cin != Cin_w:
        raise ValueError(f"conv1d expects {Cin_w} input channels, got {Cin}")
    if K % 2 == 0:
        raise ValueError("conv1d kernel size must be odd")
    r = _reps(x, w, b)
    if r:
        cols = _im2col(_full(x, r).reshape(r * B, Cin, L), K).reshape(r, B * L, Cin * K)
        wm = _full(w, r).reshape(r, Cout, Cin * K)
        out = cols @ np.swapaxes(wm, -1, -2)
        if b is not None:
            out = out + _full(b, r).reshape(r, 1, Cout)
        return _make(np.ascontiguousarray(out.reshape(r, B, L, Cout).transpose(0, 1, 3, 2)), (), None, r)
    pad = K // 2
    cols = _im2col(x.data, K)
    wm = w.data.reshape(Cout, Cin * K)
    out = cols @ wm.T  # [B, L, Cout]
    if b is not None:
        out += b.data
        parents = (x, w, b)
    else:
        parents = (x, w)
    out = np.ascontiguousarray(out.transpose(0, 2, 1))

    def fn(g):
        gt = g.transpose(0, 2, 1)  # [B, L, Cout]
        gx = gw = None
        if x.requires_grad:
            gcols = (gt @ wm).reshape(B, L, Cin, K)
            gxp = np.zeros((B, Cin, L + 2 * pad), dtype=DTYPE)
            for k in range(K):
                gxp[:, :, k : k + L] += gcols[:, :, :, k].transpose(0, 2, 1)
            gx = gxp[:, :, pad : pad + L]
        if w.requires_grad:
            gw = (gt.reshape(-1, Cout).T @ cols.reshape(-1, Cin * K)).reshape(Cout, Cin, K)
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2))

    return _make(out, parents, fn)


def embedding(table, idx) -> Tensor:
    table = as_tensor(table)
    idx = np.asarray(idx, dtype=np.int64)
    if table.rep:
        return _make(table.data[:, idx], (), None, table.rep)
    shape = table.shape

    def fn(g):
        full = np.zeros(shape, dtype=DTYPE)
        np.add.at(full, idx, g)
        return (full,)

    return _make(table.data[idx], (table,), fn)


def attention(q, k, v, capture: bool = False) -> Tensor:
    """Scaled dot-product attention over the last two axes.

    q, k, v: [..., T, d]. With ``capture`` the attention weights
    [..., T, T] are kept on ``out.cache``.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    r = _reps(q, k, v)
    n = q.ndim
    qd, kd, vd = (_lift(t, n, r) for t in (q, k, v)) if r else (q.data, k.data, v.data)
    scale = 1.0 / math.sqrt(q.shape[-1])
    att = _softmax((qd @ np.swapaxes(kd, -1, -2)) * scale, -1)
    if r:
        out = _make(att @ vd, (), None, r)
        if capture:
            out.cache = att
        return out

    def fn(g):
        gatt = g @ np.swapaxes(vd, -1, -2)
        gv = np.swapaxes(att, -1, -2) @ g
        gs = att * (gatt - (gatt * att).sum(axis=-1, keepdims=True)) * scale
        return gs @ kd, np.swapaxes(gs, -1, -2) @ qd, gv

    out = _make(att @ vd, (q, k, v), fn)
    if capture:
        out.cache = att
    return out


def mse_loss(pred, target, weight: np.ndarray | None = None) -> Tensor:
    """Mean squared error; ``weight`` (broadcastable, constant) masks entries."""
    pred = as_tensor(pred)
    target = as_tensor(target)
    r = _reps(pred, target)
    if r:
        n = pred.ndim
        diff = _lift(pred, n, r) - _lift(target, n, r)
        wt = np.ones(pred.shape) if weight is None else np.broadcast_to(np.asarray(weight, dtype=DTYPE), pred.shape)
        axes = tuple(range(1, n + 1))
        return _make((wt * diff * diff).sum(axis=axes) / wt.sum(), (), None, r)
    diff = pred.data - target.data
    if weight is None:
        cnt = diff.size
        out = np.array((diff * diff).sum() / cnt, dtype=DTYPE)
        return _make(out, (pred,), lambda g: (g * 2.0 * diff / cnt,))
    wt = np.broadcast_to(np.asarray(weight, dtype=DTYPE), diff.shape)
    cnt = wt.sum()
    if cnt <= 0:
        raise ValueError("mse_loss weight selects no entries")
    out = np.array((wt * diff * diff).sum() / cnt, dtype=DTYPE)
    return _make(out, (pred,), lambda g: (g * 2.0 * wt * diff / cnt,))


# -- backward -----------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for p in reversed(node._parents):
            if p.requires_grad and p.id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Returns a map from parameter node id to its gradient. When ``params`` is
    given, every listed parameter appears in the map; ones the loss does not
    reach get zeros.
    """
    if loss.data.size != 1 or loss.rep:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {}
    if loss.requires_grad:
        pending: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.data)}
        for node in reversed(_topo_order(loss)):
            g = pending.pop(node.id, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                grads[node.id] = node.grad
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                prev = pending.get(p.id)
                pending[p.id] = pg if prev is None else prev + pg
    if params is not None:
        out = {}
        for p in params:
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            out[p.id] = p.grad
        return out
    return grads
