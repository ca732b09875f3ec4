"""Dense float64 tensors with reverse-mode automatic differentiation.

Everything downstream (encoders, decoders, losses) is built from the ops in
this module.  Design points:

* float64 everywhere; no mixed precision.
* Dynamic tape: every op returns a new ``Tensor`` holding its parents and a
  vector-Jacobian closure.  ``Tensor.backward()`` walks the tape in reverse
  topological order.  Repeated ``backward()`` calls accumulate gradients
  additively; call ``zero_grad`` (or set ``grad = None``) between steps.
* One-sided broadcasting only.  For elementwise binary ops the two shapes are
  right-aligned, the shorter one padded with leading 1s; every aligned axis
  must then either match or be 1 *on a single operand across all axes* (the
  output shape always equals one operand's padded shape).  Mutual expansion
  (e.g. ``[3,1] * [1,4]``) is rejected so outer-product-style surprises fail
  loudly.  Scalars broadcast with anything.  Batched matmul applies the same
  rule to the leading dimensions.
* ``RngState`` is a counter-based Philox generator keyed by
  blake2b-128(seed, stream).  Identical seed and stream path give an
  identical draw sequence on every platform.  Each named stream is meant to
  be consumed by a single call site; derive substreams with ``split``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import ContractError, DegenerateInputError, ShapeError

Array = np.ndarray

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into ``grad`` of every reachable
        tracked tensor.  ``self`` must be a scalar."""
        if self.size != 1:
            raise ContractError(f"backward() requires a scalar loss, got shape {self.shape}")
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
        # Gradients for *this* pass live in a local map so stale .grad values
        # from earlier passes never leak into the propagation.
        pending: dict[int, Array] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            node.grad = g if node.grad is None else node.grad + g
            if node._vjp is None:
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pid = id(parent)
                if pid in pending:
                    pending[pid] = pending[pid] + pg
                else:
                    pending[pid] = pg

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


# -- broadcasting helpers ------------------------------------------------

def _check_one_sided(sa: tuple[int, ...], sb: tuple[int, ...]) -> tuple[int, ...]:
    """Validate the one-sided broadcast rule and return the output shape."""
    if sa == sb:
        return sa
    nd = max(len(sa), len(sb))
    pa = (1,) * (nd - len(sa)) + sa
    pb = (1,) * (nd - len(sb)) + sb
    out = []
    a_expands = len(sa) < nd
    b_expands = len(sb) < nd
    for da, db in zip(pa, pb):
        if da == db:
            out.append(da)
        elif da == 1:
            out.append(db)
            a_expands = True
        elif db == 1:
            out.append(da)
            b_expands = True
        else:
            raise ShapeError(f"shapes {sa} and {sb} are not broadcastable")
    # Scalars (all-ones shapes) may expand against anything.
    a_scalar = all(d == 1 for d in pa)
    b_scalar = all(d == 1 for d in pb)
    if a_expands and b_expands and not (a_scalar or b_scalar):
        raise ShapeError(f"mutual broadcast of {sa} and {sb} rejected (one-sided rule)")
    return tuple(out)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum ``grad`` down to ``shape`` (inverse of a broadcast)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# -- elementwise binary ops ----------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_one_sided(a.shape, b.shape)
    return _track(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_one_sided(a.shape, b.shape)
    return _track(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_one_sided(a.shape, b.shape)
    return _track(a.data * b.data, (a, b),
                  lambda g: (_unbroadcast(g * b.data, a.shape),
                             _unbroadcast(g * a.data, b.shape)))


def neg(a) -> Tensor:
    a = _coerce(a)
    return _track(-a.data, (a,), lambda g: (-g,))


# -- matmul ----------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product.  Both operands must have ndim >= 2; leading (batch)
    dimensions follow the one-sided broadcast rule."""
    a, b = _coerce(a), _coerce(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    _check_one_sided(a.shape[:-2], b.shape[:-2])

    def vjp(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _track(a.data @ b.data, (a, b), vjp)


# -- shape manipulation -----------------------------------------------------

def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    return _track(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: tuple[int, ...]) -> Tensor:
    a = _coerce(a)
    inv = np.argsort(axes)
    return _track(np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def swap_last2(a) -> Tensor:
    a = _coerce(a)
    return _track(np.swapaxes(a.data, -1, -2), (a,),
                  lambda g: (np.swapaxes(g, -1, -2),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [_coerce(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        idx = [slice(None)] * g.ndim
        outs = []
        for i in range(len(ts)):
            idx[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(idx)])
        return tuple(outs)

    return _track(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), vjp)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along ``axis``."""
    a = _coerce(a)
    idx = [slice(None)] * a.ndim
    idx[axis] = slice(start, start + length)
    idx = tuple(idx)

    def vjp(g):
        ga = np.zeros_like(a.data)
        ga[idx] = g
        return (ga,)

    return _track(a.data[idx], (a,), vjp)


def split(a, sizes, axis: int = 0) -> list[Tensor]:
    a = _coerce(a)
    if sum(sizes) != a.shape[axis]:
        raise ShapeError(f"split sizes {sizes} do not cover axis {axis} of {a.shape}")
    out, start = [], 0
    for s in sizes:
        out.append(narrow(a, axis, start, s))
        start += s
    return out


# -- reductions -------------------------------------------------------------

def _expand_reduced(g: Array, shape: tuple[int, ...], axis, keepdims: bool) -> Array:
    g = np.asarray(g)
    if axis is not None and not keepdims:
        ax = axis if isinstance(axis, tuple) else (axis,)
        ax = tuple(a % len(shape) for a in ax)
        g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape).copy()


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    return _track(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                  lambda g: (_expand_reduced(g, a.shape, axis, keepdims),))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return _track(a.data.mean(axis=axis, keepdims=keepdims), (a,),
                  lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / count,))


# -- elementwise unary ops ----------------------------------------------------

def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)
    return _track(out_data, (a,), lambda g: (g * out_data,))


def log(a) -> Tensor:
    a = _coerce(a)
    return _track(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _coerce(a)
    out_data = np.sqrt(a.data)
    return _track(out_data, (a,), lambda g: (g * 0.5 / out_data,))


def tanh(a) -> Tensor:
    a = _coerce(a)
    t = np.tanh(a.data)
    return _track(t, (a,), lambda g: (g * (1.0 - t * t),))


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    x = a.data
    # Piecewise form keeps both tails finite; the unselected branch may
    # overflow harmlessly.
    with np.errstate(over="ignore", invalid="ignore"):
        s = np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)),
                     np.exp(x) / (1.0 + np.exp(x)))
    return _track(s, (a,), lambda g: (g * s * (1.0 - s),))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = _coerce(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def vjp(g):
        return (g * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI),)

    return _track(x * cdf, (a,), vjp)


# -- fused neural-net primitives ----------------------------------------------

def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis``; the axis max is subtracted before
    exponentiation so huge logits stay finite.  -inf logits yield exact
    zeros, provided at least one entry per slice is finite."""
    a = _coerce(a)
    xm = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(xm)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _track(p, (a,), vjp)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = _coerce(a)
    xm = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(xm).sum(axis=axis, keepdims=True))
    out_data = xm - lse

    def vjp(g):
        return (g - np.exp(out_data) * g.sum(axis=axis, keepdims=True),)

    return _track(out_data, (a,), vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then apply the
    learned affine.  A constant input normalizes to zeros (epsilon guards the
    zero-variance case)."""
    x, gamma, beta = _coerce(x), _coerce(gamma), _coerce(beta)
    if gamma.shape != x.shape[-1:] or beta.shape != x.shape[-1:]:
        raise ShapeError(f"layer_norm affine {gamma.shape}/{beta.shape} "
                         f"does not match feature dim of {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat
                    - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        reduce_axes = tuple(range(g.ndim - 1))
        ggamma = (g * xhat).sum(axis=reduce_axes)
        gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    return _track(xhat * gamma.data + beta.data, (x, gamma, beta), vjp)


def l2_normalize(x, axis: int = -1) -> Tensor:
    """Scale slices along ``axis`` to unit L2 norm.  Zero-norm input is a
    degenerate-input error rather than a silent NaN."""
    x = _coerce(x)
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    if np.any(norm < 1e-12):
        raise DegenerateInputError("l2_normalize received a zero-norm slice")
    y = x.data / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=axis, keepdims=True)) / norm,)

    return _track(y, (x,), vjp)


def embedding_lookup(table, ids: Array) -> Tensor:
    """Gather rows of ``table`` ([V, C]) by an integer array of any shape;
    output shape is ids.shape + (C,)."""
    table = _coerce(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding ids outside [0, {table.shape[0]})")

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (gt,)

    return _track(table.data[ids], (table,), vjp)


def detach(a: Tensor) -> Tensor:
    return a.detach()


# -- parameters ----------------------------------------------------------------

class Parameter:
    """A named, trainable tensor.

    ``frozen`` is honored by the optimizer: frozen parameters receive zero
    updates and stay bit-identical across steps.  Values are filled in by
    ``Module.initialize`` from the rng stream derived from the parameter
    name, so initialization is independent of construction order.
    """

    __slots__ = ("name", "tensor", "frozen", "init_kind", "init_scale")

    def __init__(self, shape, init: str = "normal", scale: float | None = None):
        self.tensor = Tensor(np.zeros(shape), requires_grad=True)
        self.name = ""
        self.frozen = False
        self.init_kind = init
        self.init_scale = scale

    @property
    def data(self) -> Array:
        return self.tensor.data

    @data.setter
    def data(self, value) -> None:
        self.tensor.data = np.asarray(value, dtype=np.float64).reshape(self.tensor.shape)

    @property
    def grad(self) -> Array | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def initialize(self, rng: "RngState") -> None:
        shape = self.tensor.shape
        if self.init_kind == "normal":
            scale = self.init_scale if self.init_scale is not None else 0.02
            self.tensor.data = rng.normal(shape, scale)
        elif self.init_kind == "fan_in":
            fan = shape[0] if len(shape) >= 1 else 1
            self.tensor.data = rng.normal(shape, 1.0 / np.sqrt(fan))
        elif self.init_kind == "zeros":
            self.tensor.data = np.zeros(shape)
        elif self.init_kind == "ones":
            self.tensor.data = np.ones(shape)
        else:
            raise ContractError(f"unknown init kind {self.init_kind!r}")

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, frozen={self.frozen})"


# -- deterministic rng -----------------------------------------------------------

@dataclass(frozen=True)
class RngState:
    """Counter-based random stream: Philox4x64 keyed by
    blake2b-128(seed, stream path).

    The same (seed, stream) pair yields the same draw sequence on every
    platform.  Derive a fresh substream with ``split`` for every independent
    consumer (one stream per draw site); a stream's generator always starts
    from counter zero.
    """

    seed: int
    stream: str = ""

    algorithm = "philox4x64/blake2b-128(seed,stream)"

    def split(self, name: str) -> "RngState":
        path = f"{self.stream}/{name}" if self.stream else name
        return RngState(self.seed, path)

    def generator(self) -> np.random.Generator:
        key_bytes = hashlib.blake2b(
            f"{self.seed}\x1f{self.stream}".encode(), digest_size=16).digest()
        return np.random.Generator(np.random.Philox(key=int.from_bytes(key_bytes, "little")))

    def normal(self, shape, scale: float = 1.0) -> Array:
        return self.generator().normal(0.0, scale, size=shape)

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Array:
        return self.generator().uniform(low, high, size=shape)

    def permutation(self, n: int) -> Array:
        return self.generator().permutation(n)

    def integers(self, low: int, high: int, size=None) -> Array:
        return self.generator().integers(low, high, size=size)
