"""Dense float64 tensors with a define-by-run graph.

Every primitive is a :class:`Function` whose backward pass is itself written
with differentiable tensor operations, so gradients can be differentiated
again (double backward). That is what makes Hessian-vector products exact.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

DTYPE = np.float64

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def set_grad_enabled(mode: bool):
    prev = is_grad_enabled()
    _state.grad_enabled = mode
    try:
        yield
    finally:
        _state.grad_enabled = prev


def no_grad():
    return set_grad_enabled(False)


def enable_grad():
    return set_grad_enabled(True)


class NonFiniteError(FloatingPointError):
    """Raised when a non-finite value shows up while differentiating."""

    def __init__(self, op_name: str, where: str):
        super().__init__(f"non-finite value in {where} of op '{op_name}'")
        self.op_name = op_name
        self.where = where


class Node:
    __slots__ = ("op", "inputs", "attrs", "ctx")

    def __init__(self, op, inputs, attrs, ctx):
        self.op = op
        self.inputs = inputs
        self.attrs = attrs
        self.ctx = ctx


class Context(dict):
    """Scratch space a primitive keeps between forward and backward."""

    __getattr__ = dict.__getitem__
    __setattr__ = dict.__setitem__


class Tensor:
    __slots__ = ("data", "requires_grad", "node", "name", "__weakref__")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators (implemented in ops) -------------------------------------
    def __add__(self, other):
        return ops.add(self, other)

    def __radd__(self, other):
        return ops.add(other, self)

    def __sub__(self, other):
        return ops.sub(self, other)

    def __rsub__(self, other):
        return ops.sub(other, self)

    def __mul__(self, other):
        return ops.mul(self, other)

    def __rmul__(self, other):
        return ops.mul(other, self)

    def __truediv__(self, other):
        return ops.div(self, other)

    def __rtruediv__(self, other):
        return ops.div(other, self)

    def __neg__(self):
        return ops.neg(self)

    def __pow__(self, p):
        return ops.power(self, p)

    def __matmul__(self, other):
        return ops.matmul(self, other)

    def __rmatmul__(self, other):
        return ops.matmul(other, self)

    def __getitem__(self, index):
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return ops.sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return ops.mean(self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return ops.max(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return ops.transpose(self, tuple(axes))

    @property
    def T(self):
        return ops.transpose(self, None)

    def exp(self):
        return ops.exp(self)

    def log(self):
        return ops.log(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A primitive operation.

    Subclasses implement ``forward(ctx, *arrays, **attrs) -> ndarray`` and
    ``backward(ctx, g, inputs, out) -> tuple`` where ``g`` and the returned
    gradients are :class:`Tensor` objects. The backward pass must only use
    tensor operations so it can be recorded for higher-order derivatives.
    """

    name = "function"

    @classmethod
    def apply(cls, *inputs, **attrs) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        ctx = Context()
        out = Tensor(cls.forward(ctx, *(t.data for t in tensors), **attrs))
        if is_grad_enabled() and any(t.requires_grad for t in tensors):
            out.requires_grad = True
            out.node = Node(cls, tensors, attrs, ctx)
        return out

    @staticmethod
    def forward(ctx, *arrays, **attrs):
        raise NotImplementedError

    @staticmethod
    def backward(ctx, g, inputs, out):
        raise NotImplementedError


def _topo_order(roots) -> list:
    order, seen = [], set()
    stack = [(r, False) for r in roots if r.requires_grad]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def grad(outputs, inputs, grad_outputs=None, create_graph: bool = False,
         check_finite: bool = False) -> list:
    """Gradients of ``outputs`` w.r.t. ``inputs`` (zeros for unused inputs).

    With ``create_graph=True`` the returned tensors are themselves part of a
    differentiable graph.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
    single = isinstance(inputs, Tensor)
    if single:
        inputs = [inputs]
    if grad_outputs is None:
        for o in outputs:
            if o.size != 1:
                raise ValueError(f"grad needs a scalar output, got shape {o.shape}")
        grad_outputs = [Tensor(np.ones_like(o.data)) for o in outputs]
    else:
        grad_outputs = [as_tensor(g) for g in grad_outputs]

    grads: dict[int, Tensor] = {}
    for o, g in zip(outputs, grad_outputs):
        if o.requires_grad:
            grads[id(o)] = grads[id(o)] + g if id(o) in grads else g

    wanted = {id(t) for t in inputs}
    found: dict[int, Tensor] = {}
    order = _topo_order(outputs)
    with set_grad_enabled(create_graph):
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if id(t) in wanted:
                found[id(t)] = g
            node = t.node
            if node is None:
                continue
            in_grads = node.op.backward(node.ctx, g, node.inputs, t)
            for parent, pg in zip(node.inputs, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if check_finite and not np.all(np.isfinite(pg.data)):
                    raise NonFiniteError(node.op.name, f"gradient of input {parent.shape}")
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    result = [found.get(id(t), Tensor(np.zeros(t.shape))) for t in inputs]
    return result[0] if single else result


from . import ops  # noqa: E402  (operators above dispatch into ops)
