"""Parameter vectors, replayable tapes and Hessian-vector products."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import ops
from .tensor import NonFiniteError, Tensor, grad, set_grad_enabled


class ParamVector:
    """Ordered named parameter leaves that flatten to one vector."""

    def __init__(self, segments: Mapping[str, np.ndarray] | Iterable = ()):
        items = segments.items() if isinstance(segments, Mapping) else segments
        self.segments: OrderedDict[str, np.ndarray] = OrderedDict(
            (name, np.asarray(arr, dtype=np.float64)) for name, arr in items)

    # mapping protocol
    def __getitem__(self, name):
        return self.segments[name]

    def __setitem__(self, name, value):
        self.segments[name] = np.asarray(value, dtype=np.float64)

    def __contains__(self, name):
        return name in self.segments

    def __iter__(self):
        return iter(self.segments)

    def __len__(self):
        return len(self.segments)

    def items(self):
        return self.segments.items()

    def names(self) -> list:
        return list(self.segments)

    @property
    def total_dim(self) -> int:
        return int(sum(a.size for a in self.segments.values()))

    def flatten(self) -> np.ndarray:
        if not self.segments:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self.segments.values()])

    def unflatten(self, vec: np.ndarray) -> ParamVector:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.total_dim:
            raise ValueError(f"vector of size {vec.size} does not match total_dim {self.total_dim}")
        out, start = [], 0
        for name, a in self.segments.items():
            out.append((name, vec[start:start + a.size].reshape(a.shape).copy()))
            start += a.size
        return ParamVector(out)

    def copy(self) -> ParamVector:
        return ParamVector((k, v.copy()) for k, v in self.segments.items())

    def zeros_like(self) -> ParamVector:
        return ParamVector((k, np.zeros_like(v)) for k, v in self.segments.items())

    def map(self, fn) -> ParamVector:
        return ParamVector((k, fn(k, v)) for k, v in self.segments.items())

    def subset(self, names) -> ParamVector:
        return ParamVector((k, self.segments[k]) for k in names)

    def tensors(self, requires_grad: bool = True) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, name=k)
                for k, v in self.segments.items()}

    def dot(self, other: ParamVector) -> float:
        return float(sum(np.vdot(a, other[k]) for k, a in self.segments.items()))

    def norm(self) -> float:
        return float(np.sqrt(self.dot(self)))

    def _combine(self, other, fn):
        if isinstance(other, ParamVector):
            return ParamVector((k, fn(v, other[k])) for k, v in self.segments.items())
        return ParamVector((k, fn(v, other)) for k, v in self.segments.items())

    def __add__(self, other):
        return self._combine(other, np.add)

    def __sub__(self, other):
        return self._combine(other, np.subtract)

    def __mul__(self, scalar):
        return self._combine(scalar, np.multiply)

    __rmul__ = __mul__

    def allclose(self, other, rtol=1e-12, atol=0.0) -> bool:
        return self.names() == other.names() and all(
            np.allclose(v, other[k], rtol=rtol, atol=atol) for k, v in self.items())

    def equal(self, other) -> bool:
        return self.names() == other.names() and all(
            np.array_equal(v, other[k]) for k, v in self.items())

    def __repr__(self):
        return f"ParamVector({len(self)} segments, total_dim={self.total_dim})"


class TapeError(ValueError):
    def __init__(self, node_id: int, message: str):
        super().__init__(f"node {node_id}: {message}")
        self.node_id = node_id


@dataclass
class TapeNode:
    id: int
    kind: str  # "input", "const" or "op"
    op: type | None = None
    inputs: tuple = ()
    attrs: dict = field(default_factory=dict)
    value: np.ndarray | None = None
    name: str | None = None
    shape: tuple = ()


class Tape:
    """A recorded computation that can be replayed on fresh inputs.

    Nodes are stored in topological order; constants captured during
    recording are frozen into the tape.
    """

    def __init__(self, nodes: list, input_ids: list, output_ids: list):
        self.nodes = nodes
        self.input_ids = input_ids
        self.output_ids = output_ids

    @property
    def input_names(self) -> list:
        return [self.nodes[i].name for i in self.input_ids]

    @classmethod
    def record(cls, fn: Callable, inputs) -> Tape:
        """Trace ``fn`` on ``inputs`` (a mapping name -> array, or a list)."""
        if isinstance(inputs, ParamVector):
            inputs = inputs.segments
        named = list(inputs.items()) if isinstance(inputs, Mapping) else [
            (f"x{i}", a) for i, a in enumerate(inputs)]
        leaves = [Tensor(a, requires_grad=True, name=n) for n, a in named]
        with set_grad_enabled(True):
            outs = fn(*leaves) if not isinstance(inputs, Mapping) else fn(
                {n: t for (n, _), t in zip(named, leaves)})
        if isinstance(outs, Tensor):
            outs = [outs]
        outs = [o if isinstance(o, Tensor) else Tensor(o) for o in outs]

        ids: dict[int, int] = {}
        nodes: list[TapeNode] = []
        for t in leaves:
            ids[id(t)] = len(nodes)
            nodes.append(TapeNode(len(nodes), "input", name=t.name, shape=t.shape))

        def visit(root):
            stack = [(root, False)]
            while stack:
                t, expanded = stack.pop()
                if id(t) in ids:
                    continue
                if t.node is None:
                    ids[id(t)] = len(nodes)
                    nodes.append(TapeNode(len(nodes), "const", value=t.data.copy(), shape=t.shape))
                    continue
                if expanded:
                    ids[id(t)] = len(nodes)
                    nodes.append(TapeNode(
                        len(nodes), "op", op=t.node.op,
                        inputs=tuple(ids[id(p)] for p in t.node.inputs),
                        attrs=dict(t.node.attrs), shape=t.shape))
                    continue
                stack.append((t, True))
                for p in reversed(t.node.inputs):
                    if id(p) not in ids:
                        stack.append((p, False))

        for o in outs:
            visit(o)
        # keep leaves alive until ids are resolved
        del leaves
        return cls(nodes, list(range(len(named))), [ids[id(o)] for o in outs])

    def _coerce_inputs(self, inputs) -> list:
        if isinstance(inputs, ParamVector):
            inputs = inputs.segments
        if isinstance(inputs, Mapping):
            missing = [n for n in self.input_names if n not in inputs]
            if missing:
                raise TapeError(self.input_ids[0], f"missing inputs {missing}")
            arrays = [inputs[n] for n in self.input_names]
        else:
            arrays = list(inputs)
            if len(arrays) != len(self.input_ids):
                raise TapeError(self.input_ids[0] if self.input_ids else 0,
                                f"expected {len(self.input_ids)} inputs, got {len(arrays)}")
        return arrays

    def forward(self, inputs, requires_grad: bool = False) -> list:
        """Replay the tape; returns one tensor per recorded output."""
        arrays = self._coerce_inputs(inputs)
        values: dict[int, Tensor] = {}
        for nid, a in zip(self.input_ids, arrays):
            t = a if isinstance(a, Tensor) else Tensor(a, requires_grad=requires_grad)
            if t.shape != self.nodes[nid].shape:
                raise TapeError(nid, f"input shape {t.shape} != recorded {self.nodes[nid].shape}")
            values[nid] = t
        for node in self.nodes:
            if node.kind == "const":
                values[node.id] = Tensor(node.value)
            elif node.kind == "op":
                try:
                    out = node.op.apply(*(values[i] for i in node.inputs), **node.attrs)
                except (ValueError, IndexError) as exc:
                    raise TapeError(node.id, str(exc)) from exc
                if out.shape != node.shape:
                    raise TapeError(node.id, f"output shape {out.shape} != recorded {node.shape}")
                values[node.id] = out
        return [values[i] for i in self.output_ids]

    def grad(self, inputs, output: int = 0, wrt: Iterable[str] | None = None) -> ParamVector:
        """Gradient of the scalar output ``output`` w.r.t. named inputs."""
        arrays = self._coerce_inputs(inputs)
        with set_grad_enabled(True):
            leaves = [Tensor(a.data if isinstance(a, Tensor) else a, requires_grad=True)
                      for a in arrays]
            outs = self.forward(leaves)
        y = outs[output]
        if y.size != 1:
            raise ValueError(f"output {output} is not scalar (shape {y.shape})")
        names = self.input_names
        wanted = [i for i, n in enumerate(names) if wrt is None or n in set(wrt)]
        gs = grad(y, [leaves[i] for i in wanted])
        return ParamVector((names[i], g.data) for i, g in zip(wanted, gs))


def forward(tape: Tape, inputs) -> list:
    return tape.forward(inputs)


def tape_grad(tape: Tape, inputs, output: int = 0, wrt=None) -> ParamVector:
    return tape.grad(inputs, output, wrt)


def value_and_grad(loss_closure: Callable, theta: ParamVector):
    """Evaluate ``loss_closure`` (dict of tensors -> scalar) and its gradient."""
    leaves = theta.tensors(requires_grad=True)
    with set_grad_enabled(True):
        loss = loss_closure(leaves)
    if loss.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    gs = grad(loss, list(leaves.values()))
    return loss.item(), ParamVector((k, g.data) for k, g in zip(leaves, gs))


def hvp(loss_closure: Callable, theta: ParamVector, v: ParamVector) -> ParamVector:
    """Exact Hessian-vector product via double backward: d/dθ <∇L(θ), v>."""
    if v.total_dim != theta.total_dim:
        raise ValueError(f"dim(v)={v.total_dim} != dim(theta)={theta.total_dim}")
    leaves = theta.tensors(requires_grad=True)
    params = list(leaves.values())
    with set_grad_enabled(True):
        loss = loss_closure(leaves)
        if not np.all(np.isfinite(loss.data)):
            raise NonFiniteError("loss", "forward value")
        gs = grad(loss, params, create_graph=True, check_finite=True)
        inner = None
        for name, g in zip(leaves, gs):
            term = ops.dot(g, Tensor(v[name]))
            inner = term if inner is None else inner + term
    hv = grad(inner, params, check_finite=True)
    return ParamVector((k, h.data) for k, h in zip(leaves, hv))
