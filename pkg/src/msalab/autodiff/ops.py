"""Primitive operations and the small set of composites built from them.

Primitives: add, sub, mul, div, neg, power, exp, log, matmul, sum, max,
reshape, transpose, broadcast/sum-to, getitem/embed, take/scatter-add,
concat, softmax, relu, gelu. Everything else (mean, layer statistics,
log-softmax, conv2d in ``msalab.nn``) is composed from these.
"""
from __future__ import annotations

import contextlib
import math
from collections import OrderedDict

import numpy as np
import scipy.sparse as sp
from scipy.special import erf

from .tensor import Function, Tensor, as_tensor

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


# ---------------------------------------------------------------------------
# broadcasting helpers
# ---------------------------------------------------------------------------
def _sum_to_array(a: np.ndarray, shape: tuple) -> np.ndarray:
    if a.shape == shape:
        return a
    lead = a.ndim - len(shape)
    if lead:
        a = a.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a.reshape(shape)


class SumTo(Function):
    name = "sum_to"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.in_shape = a.shape
        return _sum_to_array(a, tuple(shape))

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (broadcast_to(g, ctx.in_shape),)


class BroadcastTo(Function):
    name = "broadcast_to"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.in_shape = a.shape
        return np.ascontiguousarray(np.broadcast_to(a, tuple(shape)))

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (sum_to(g, ctx.in_shape),)


def sum_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return SumTo.apply(x, shape=shape)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    return BroadcastTo.apply(x, shape=shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------
class Add(Function):
    name = "add"

    @staticmethod
    def forward(ctx, a, b):
        return a + b

    @staticmethod
    def backward(ctx, g, inputs, out):
        a, b = inputs
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(g, b.shape) if b.requires_grad else None)


class Sub(Function):
    name = "sub"

    @staticmethod
    def forward(ctx, a, b):
        return a - b

    @staticmethod
    def backward(ctx, g, inputs, out):
        a, b = inputs
        return (sum_to(g, a.shape) if a.requires_grad else None,
                sum_to(neg(g), b.shape) if b.requires_grad else None)


class Neg(Function):
    name = "neg"

    @staticmethod
    def forward(ctx, a):
        return -a

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (neg(g),)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(ctx, a, b):
        return a * b

    @staticmethod
    def backward(ctx, g, inputs, out):
        a, b = inputs
        return (sum_to(g * b, a.shape) if a.requires_grad else None,
                sum_to(g * a, b.shape) if b.requires_grad else None)


class Div(Function):
    name = "div"

    @staticmethod
    def forward(ctx, a, b):
        return a / b

    @staticmethod
    def backward(ctx, g, inputs, out):
        a, b = inputs
        ga = sum_to(g / b, a.shape) if a.requires_grad else None
        gb = sum_to(neg(g * out / b), b.shape) if b.requires_grad else None
        return ga, gb


class Power(Function):
    name = "power"

    @staticmethod
    def forward(ctx, a, p):
        ctx.p = p
        return np.power(a, p)

    @staticmethod
    def backward(ctx, g, inputs, out):
        (a,) = inputs
        p = ctx.p
        if p == 1.0:
            return (g,)
        if p == 2.0:
            return (g * a * 2.0,)
        return (g * power(a, p - 1.0) * p,)


class Exp(Function):
    name = "exp"

    @staticmethod
    def forward(ctx, a):
        return np.exp(a)

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (g * out,)


class Log(Function):
    name = "log"

    @staticmethod
    def forward(ctx, a):
        return np.log(a)

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (g / inputs[0],)


# ---------------------------------------------------------------------------
# linear algebra and reductions
# ---------------------------------------------------------------------------
def _mT(x: Tensor) -> Tensor:
    return x.swapaxes(-1, -2)


class MatMul(Function):
    name = "matmul"

    @staticmethod
    def forward(ctx, a, b):
        if a.ndim < 2 or b.ndim < 2:
            raise ValueError("matmul operands need at least 2 dimensions")
        if b.ndim == 2 and a.ndim > 2:
            # one large GEMM instead of a stack of small ones
            return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[1],))
        return np.matmul(a, b)

    @staticmethod
    def backward(ctx, g, inputs, out):
        a, b = inputs
        ga = sum_to(matmul(g, _mT(b)), a.shape) if a.requires_grad else None
        if not b.requires_grad:
            gb = None
        elif b.ndim == 2 and a.ndim > 2:
            gb = matmul(_mT(reshape(a, (-1, a.shape[-1]))), reshape(g, (-1, g.shape[-1])))
        else:
            gb = sum_to(matmul(_mT(a), g), b.shape)
        return ga, gb


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _keep_shape(shape, axes):
    return tuple(1 if i in axes else n for i, n in enumerate(shape))


class Sum(Function):
    name = "sum"

    @staticmethod
    def forward(ctx, a, axis, keepdims):
        ctx.in_shape = a.shape
        return np.sum(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g, inputs, out):
        shape = ctx.in_shape
        axes = _norm_axes(out.node.attrs["axis"], len(shape))
        return (broadcast_to(reshape(g, _keep_shape(shape, axes)), shape),)


class Max(Function):
    """Max reduction; ties route the gradient to the first index."""

    name = "max"

    @staticmethod
    def forward(ctx, a, axis, keepdims):
        axes = _norm_axes(axis, a.ndim)
        keep = [i for i in range(a.ndim) if i not in axes]
        moved = np.transpose(a, keep + list(axes))
        flat = moved.reshape(moved.shape[:len(keep)] + (-1,))
        idx = np.argmax(flat, axis=-1)
        mask = np.zeros_like(flat)
        np.put_along_axis(mask, idx[..., None], 1.0, axis=-1)
        mask = mask.reshape(moved.shape)
        ctx.mask = np.transpose(mask, np.argsort(keep + list(axes)))
        return np.max(a, axis=axis, keepdims=keepdims)

    @staticmethod
    def backward(ctx, g, inputs, out):
        shape = ctx.mask.shape
        axes = _norm_axes(out.node.attrs["axis"], len(shape))
        gb = broadcast_to(reshape(g, _keep_shape(shape, axes)), shape)
        return (gb * ctx.mask,)


# ---------------------------------------------------------------------------
# shape and indexing
# ---------------------------------------------------------------------------
class Reshape(Function):
    name = "reshape"

    @staticmethod
    def forward(ctx, a, shape):
        ctx.in_shape = a.shape
        return a.reshape(shape)

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (reshape(g, ctx.in_shape),)


class Transpose(Function):
    name = "transpose"

    @staticmethod
    def forward(ctx, a, axes):
        return np.ascontiguousarray(np.transpose(a, axes))

    @staticmethod
    def backward(ctx, g, inputs, out):
        axes = out.node.attrs["axes"]
        if axes is None:
            return (transpose(g, None),)
        return (transpose(g, tuple(np.argsort(axes))),)


class GetItem(Function):
    name = "getitem"

    @staticmethod
    def forward(ctx, a, index):
        ctx.in_shape = a.shape
        return np.array(a[index], dtype=a.dtype)

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (embed(g, out.node.attrs["index"], ctx.in_shape),)


class Embed(Function):
    """Adjoint of getitem: scatter ``a`` into zeros of ``shape`` at ``index``."""

    name = "embed"

    @staticmethod
    def forward(ctx, a, index, shape):
        z = np.zeros(shape, dtype=a.dtype)
        np.add.at(z, index, a)
        return z

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (getitem(g, out.node.attrs["index"]),)


_SCATTER_CACHE: OrderedDict = OrderedDict()


def _scatter_matrix(idx: np.ndarray, size: int):
    key = (id(idx), size)
    hit = _SCATTER_CACHE.get(key)
    if hit is not None and hit[0] is idx:
        _SCATTER_CACHE.move_to_end(key)
        return hit[1]
    flat = idx.ravel()
    mat = sp.csr_matrix((np.ones(flat.size), (np.arange(flat.size), flat)),
                        shape=(flat.size, size))
    _SCATTER_CACHE[key] = (idx, mat)
    if len(_SCATTER_CACHE) > 256:
        _SCATTER_CACHE.popitem(last=False)
    return mat


class Take(Function):
    """Gather along ``axis`` with an integer index array (any shape)."""

    name = "take"

    @staticmethod
    def forward(ctx, a, idx, axis):
        ctx.size = a.shape[axis]
        return np.take(a, idx, axis=axis)

    @staticmethod
    def backward(ctx, g, inputs, out):
        at = out.node.attrs
        return (scatter_add(g, at["idx"], at["axis"], ctx.size),)


class ScatterAdd(Function):
    """Adjoint of take: sum entries of ``a`` into ``size`` slots along ``axis``."""

    name = "scatter_add"

    @staticmethod
    def forward(ctx, a, idx, axis, size):
        axis = axis % a.ndim
        k = idx.ndim
        lead, trail = a.shape[:axis], a.shape[axis + k:]
        moved = np.moveaxis(a.reshape(lead + (idx.size,) + trail), axis, -1)
        flat = moved.reshape(-1, idx.size)
        res = (_scatter_matrix(idx, size).T @ flat.T).T
        res = np.asarray(res).reshape(moved.shape[:-1] + (size,))
        return np.ascontiguousarray(np.moveaxis(res, -1, axis))

    @staticmethod
    def backward(ctx, g, inputs, out):
        at = out.node.attrs
        return (take(g, at["idx"], at["axis"]),)


class Concat(Function):
    name = "concat"

    @staticmethod
    def forward(ctx, *arrays, axis):
        ctx.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    @staticmethod
    def backward(ctx, g, inputs, out):
        axis = out.node.attrs["axis"] % g.ndim
        grads, start = [], 0
        for t, n in zip(inputs, ctx.sizes):
            index = (slice(None),) * axis + (slice(start, start + n),)
            grads.append(getitem(g, index) if t.requires_grad else None)
            start += n
        return tuple(grads)


# ---------------------------------------------------------------------------
# nonlinearities
# ---------------------------------------------------------------------------
class Softmax(Function):
    name = "softmax"

    @staticmethod
    def forward(ctx, a, axis):
        z = a - np.max(a, axis=axis, keepdims=True)
        e = np.exp(z)
        return e / np.sum(e, axis=axis, keepdims=True)

    @staticmethod
    def backward(ctx, g, inputs, out):
        axis = out.node.attrs["axis"]
        return (out * (g - sum(g * out, axis=axis, keepdims=True)),)


_kink_log: list | None = None


@contextlib.contextmanager
def record_kinks():
    """Collect the sign pattern of every ReLU input evaluated inside the block.

    Finite-difference oracles use this to detect when a perturbation crosses a
    non-differentiable point.
    """
    global _kink_log
    prev, _kink_log = _kink_log, []
    try:
        yield _kink_log
    finally:
        _kink_log = prev


class ReLU(Function):
    name = "relu"

    @staticmethod
    def forward(ctx, a):
        mask = a > 0
        if _kink_log is not None:
            _kink_log.append(mask)
        ctx.mask = mask.astype(a.dtype)
        return a * ctx.mask

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (g * ctx.mask,)


def _phi(x):
    return np.exp(-0.5 * x * x) * _INV_SQRT_2PI


class GELU(Function):
    """Exact GELU, x * Phi(x)."""

    name = "gelu"

    @staticmethod
    def forward(ctx, a):
        return a * 0.5 * (1.0 + erf(a / _SQRT2))

    @staticmethod
    def backward(ctx, g, inputs, out):
        return (g * GELUDeriv.apply(inputs[0]),)


class GELUDeriv(Function):
    name = "gelu_deriv"

    @staticmethod
    def forward(ctx, a):
        return 0.5 * (1.0 + erf(a / _SQRT2)) + a * _phi(a)

    @staticmethod
    def backward(ctx, g, inputs, out):
        x = inputs[0]
        pdf = exp(x * x * -0.5) * _INV_SQRT_2PI
        return (g * pdf * (2.0 - x * x),)


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------
def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def neg(a):
    return Neg.apply(a)


def mul(a, b):
    return Mul.apply(a, b)


def div(a, b):
    return Div.apply(a, b)


def power(a, p):
    return Power.apply(a, p=float(p))


def exp(a):
    return Exp.apply(a)


def log(a):
    return Log.apply(a)


def matmul(a, b):
    return MatMul.apply(a, b)


def sum(a, axis=None, keepdims=False):  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return Sum.apply(a, axis=axis, keepdims=keepdims)


def max(a, axis=None, keepdims=False):  # noqa: A001
    if isinstance(axis, list):
        axis = tuple(axis)
    return Max.apply(a, axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return sum(a, axis, keepdims) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return Reshape.apply(a, shape=shape)


def transpose(a, axes=None):
    return Transpose.apply(a, axes=None if axes is None else tuple(axes))


def getitem(a, index):
    return GetItem.apply(a, index=index)


def embed(a, index, shape):
    return Embed.apply(a, index=index, shape=tuple(shape))


def take(a, idx, axis):
    a = as_tensor(a)
    return Take.apply(a, idx=np.asarray(idx), axis=axis % a.ndim)


def scatter_add(a, idx, axis, size):
    return ScatterAdd.apply(a, idx=np.asarray(idx), axis=axis, size=size)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def softmax(a, axis=-1):
    return Softmax.apply(a, axis=axis)


def relu(a):
    return ReLU.apply(a)


def gelu(a):
    return GELU.apply(a)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = np.max(a.data, axis=axis, keepdims=True)
    out = log(sum(exp(a - m), axis=axis, keepdims=True)) + m
    return out if keepdims else reshape(out, np.squeeze(out.data, axis=axis).shape)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    return a - logsumexp(a, axis=axis, keepdims=True)


def moments(x, axis, keepdims=True):
    """Mean and (biased) variance over ``axis``."""
    mu = mean(x, axis, keepdims=True)
    d = x - mu
    var = mean(d * d, axis, keepdims=True)
    if not keepdims:
        shape = np.squeeze(mu.data, axis=axis).shape
        mu, var = reshape(mu, shape), reshape(var, shape)
    return mu, var


def dot(a, b):
    """Full contraction sum(a * b)."""
    return sum(mul(a, b))
