"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays. Every op returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output adjoint to parent adjoints.
:class:`Variable` is the leaf type: it owns a ``grad`` buffer and a
``trainable`` flag. Freezing is enforced by the optimizer, not here.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class _Settings:
    dtype = np.float64
    verify = False
    stop_at_frozen = False
    grad_enabled = True


_settings = _Settings()

_PRECISIONS = {"f64": np.float64, "f32": np.float32}


def get_dtype():
    return _settings.dtype


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _settings.dtype = _PRECISIONS[name]


@contextlib.contextmanager
def precision(name: str):
    old = _settings.dtype
    set_precision(name)
    try:
        yield
    finally:
        _settings.dtype = old


@contextlib.contextmanager
def verification_mode(enabled: bool = True):
    """Raise :class:`NonFiniteError` as soon as any op produces NaN/Inf."""
    old = _settings.verify
    _settings.verify = enabled
    try:
        yield
    finally:
        _settings.verify = old


@contextlib.contextmanager
def stop_gradient_at_frozen(enabled: bool = True):
    """Skip adjoint computation for frozen Variables (they keep a stale grad)."""
    old = _settings.stop_at_frozen
    _settings.stop_at_frozen = enabled
    try:
        yield
    finally:
        _settings.stop_at_frozen = old


@contextlib.contextmanager
def no_grad():
    old = _settings.grad_enabled
    _settings.grad_enabled = False
    try:
        yield
    finally:
        _settings.grad_enabled = old


class Tensor:
    __slots__ = ("data", "_rg", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype != _settings.dtype:
            arr = arr.astype(_settings.dtype)
        self.data = arr
        self._rg = requires_grad
        self._parents: tuple = ()
        self._backward = None

    @property
    def requires_grad(self) -> bool:
        return self._rg

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def swapaxes(self, a: int, b: int):
        return swapaxes(self, a, b)


class Variable(Tensor):
    """Leaf tensor with a gradient slot and a trainable flag."""

    __slots__ = ("name", "trainable", "grad")

    def __init__(self, value, name: str = "", trainable: bool = True, copy: bool = True):
        super().__init__(np.array(value, copy=True) if copy else value, requires_grad=True)
        self.name = name
        self.trainable = trainable
        self.zero_grad()

    @property
    def requires_grad(self) -> bool:
        return self.trainable or not _settings.stop_at_frozen

    def zero_grad(self) -> None:
        if self.data.flags.writeable:
            self.grad = np.zeros_like(self.data)
        else:
            # read-only placeholder (e.g. a zero-stride view): keep the grad lazy too
            self.grad = np.broadcast_to(np.zeros((), self.data.dtype), self.data.shape)

    def __repr__(self) -> str:
        flag = "trainable" if self.trainable else "frozen"
        return f"Variable({self.name!r}, shape={self.shape}, {flag})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _make(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    if _settings.verify and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced (shape {data.shape})")
    out = Tensor.__new__(Tensor)
    out.data = data
    out._parents = ()
    out._backward = None
    out._rg = False
    if _settings.grad_enabled:
        for p in parents:
            if p.requires_grad:
                out._rg = True
                out._parents = parents
                out._backward = backward
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------- graph


class Graph:
    """Topologically ordered record of the ops that produced ``output``.

    Parents always precede children in :attr:`nodes`; the backward sweep
    walks the list in reverse and touches each node once.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.nodes = self._toposort(output)

    @staticmethod
    def _toposort(root: Tensor) -> list:
        order, seen = [], set()
        stack = [(root, False)]
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        return order

    def backward(self) -> None:
        out = self.output
        adj = {id(out): np.ones_like(out.data)}
        for node in reversed(self.nodes):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if isinstance(node, Variable):
                node.grad += g
                continue
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = adj.get(key)
                adj[key] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(v) into ``v.grad`` for every reachable Variable."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Graph(loss).backward()


# ----------------------------------------------------------------- elementwise


def _scalar_ok(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_settings.dtype))


def add(a, b) -> Tensor:
    a, b = _scalar_ok(a), _scalar_ok(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _scalar_ok(a), _scalar_ok(b)
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _scalar_ok(a), _scalar_ok(b)
    ad, bd = a.data, b.data
    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if ra else None,
                _unbroadcast(g * ad, bd.shape) if rb else None)

    return _make(ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _scalar_ok(a), _scalar_ok(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _make(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximate GELU: 0.5 x (1 + tanh(c (x + 0.044715 x^3))), c = sqrt(2/pi)."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    t = np.tanh(GELU_C * x * (1.0 + GELU_A * x2))
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = GELU_C * (1.0 + 3.0 * GELU_A * x2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


ACTIVATIONS = {"gelu": gelu, "relu": relu}


# ------------------------------------------------------------------- linalg


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {ad.shape} x {bd.shape}")
    try:
        if bd.ndim == 2 and ad.ndim > 2:
            out = (ad.reshape(-1, ad.shape[-1]) @ bd).reshape(*ad.shape[:-1], bd.shape[-1])
        else:
            out = ad @ bd
    except ValueError as exc:
        raise DimensionError(f"matmul batch dims do not broadcast: {ad.shape} x {bd.shape}") from exc

    ra, rb = a.requires_grad, b.requires_grad

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if ra else None
        gb = None
        if rb and bd.ndim == 2:
            # shared weight matrix: fold the batch dims into one GEMM instead of summing per-batch products
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        elif rb:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _make(out, (a, b), bw)


# ---------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum_(a, axes, keepdims) * (1.0 / count)


# ------------------------------------------------------------------ shaping


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    a = as_tensor(a)
    return _make(np.swapaxes(a.data, ax1, ax2), (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _make(np.broadcast_to(a.data, shape), (a,), lambda g: (_unbroadcast(g, old),))


def getitem(a: Tensor, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return _make(a.data[index], (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise DimensionError("concat of an empty list")
    ndim = tensors[0].ndim
    ax = axis % ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != ref[i] for i in range(ndim) if i != ax):
            shapes = [x.shape for x in tensors]
            raise DimensionError(f"concat along axis {axis}: incompatible shapes {shapes}")
    if len(tensors) == 1:
        return tensors[0]
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _make(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def split(a: Tensor, sizes: Sequence[int], axis: int = 0) -> list:
    """Inverse of :func:`concat`: cut ``a`` into pieces of the given extents."""
    a = as_tensor(a)
    ax = axis % a.ndim
    if sum(sizes) != a.shape[ax]:
        raise DimensionError(f"split sizes {list(sizes)} do not cover axis {axis} of {a.shape}")
    out, start = [], 0
    for n in sizes:
        idx = [slice(None)] * a.ndim
        idx[ax] = slice(start, start + n)
        out.append(getitem(a, tuple(idx)))
        start += n
    return out


# ------------------------------------------------------------- fused kernels


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    out = z / z.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gamma.data
    out = xhat * gd + beta.data

    def bw(g):
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        ggamma = _unbroadcast(g * xhat, gd.shape)
        gbeta = _unbroadcast(g, beta.data.shape)
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), bw)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean softmax cross-entropy of ``logits[B, C]`` against integer ``labels[B]``."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    x = logits.data
    b = x.shape[0]
    shifted = x - x.max(axis=-1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - logz
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / b),)

    return _make(np.asarray(loss, dtype=x.dtype), (logits,), bw)


# -------------------------------------------------------------------- oracle


def finite_difference_gradient(f: Callable[[np.ndarray], float], at, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``at``.

    ``f`` receives a perturbed copy of ``at`` for every probe, so it may not
    rely on aliasing. Cost is ``2 * at.size`` evaluations.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    x = np.array(at.data if isinstance(at, Tensor) else at, dtype=np.float64, copy=True)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x.copy()))
        flat[i] = orig - h
        fm = float(f(x.copy()))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def zero_grads(variables: Iterable[Variable]) -> None:
    for v in variables:
        v.zero_grad()
