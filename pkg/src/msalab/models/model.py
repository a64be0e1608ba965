"""Executable models built from a :class:`ModelSpec`."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff import ops
from ..autodiff.tape import ParamVector
from ..autodiff.tensor import Tensor, no_grad
from ..nn import functional as F
from .spec import CONV_KINDS, RESIDUAL_KINDS, ModelSpec, SpecError, effective_window

LINEAR_STD = 0.02


@dataclass
class Features:
    """Activations flowing between blocks, either (B,C,H,W) or (B,N,D) tokens."""

    x: Tensor
    layout: str
    grid: tuple
    n_prefix: int = 0

    def tokens(self) -> Features:
        if self.layout == "tokens":
            return self
        b, c, h, w = self.x.shape
        t = ops.reshape(ops.transpose(self.x, (0, 2, 3, 1)), (b, h * w, c))
        return Features(t, "tokens", (h, w))

    def nchw(self) -> Features:
        if self.layout == "nchw":
            return self
        if self.n_prefix:
            raise ValueError("cannot lay out class-token features as a map")
        b, n, c = self.x.shape
        h, w = self.grid
        m = ops.transpose(ops.reshape(self.x, (b, h, w, c)), (0, 3, 1, 2))
        return Features(m, "nchw", (h, w))

    def as_layout(self, layout: str) -> Features:
        return self.tokens() if layout == "tokens" else self.nchw()

    def spatial_map(self) -> np.ndarray:
        """(B, C, h, w) numpy view with any class token removed."""
        if self.layout == "nchw":
            return self.x.data
        t = self.x.data[:, self.n_prefix:, :]
        b, n, c = t.shape
        h, w = self.grid
        return t.reshape(b, h, w, c).transpose(0, 3, 1, 2)


@dataclass
class RunState:
    train: bool = False
    update_stats: bool = True
    ablate: frozenset = frozenset()
    buffers: dict = field(default_factory=dict)


def _he(rng, shape, fan_in):
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


def _small(rng, shape):
    return rng.standard_normal(shape) * LINEAR_STD


class Block:
    residual = False

    def __init__(self, path, spec, in_width, grid_in, grid_out, layout_in):
        self.path = path
        self.spec = spec
        self.in_width = in_width
        self.grid_in = grid_in
        self.grid_out = grid_out
        self.layout_in = layout_in

    layout_out = "nchw"

    def init(self, rng) -> list:
        return []

    def p(self, name):
        return f"{self.path}.{name}"

    def branch(self, f: Features, P, run: RunState) -> Features:
        raise NotImplementedError

    def __call__(self, f: Features, P, run: RunState) -> Features:
        if not self.residual:
            return self.branch(f, P, run)
        f = f.as_layout(self.layout_out)
        if self.path in run.ablate:
            return f
        out = self.branch(f, P, run)
        return Features(f.x + out.x, f.layout, f.grid, f.n_prefix)


def _bn(block, name, x, P, run):
    key = block.p(name)
    stats = run.buffers[key]
    return F.batch_norm(x, P[key + ".g"], P[key + ".beta"], running=stats, training=run.train)


def _ln(block, name, x, P):
    key = block.p(name)
    return F.layer_norm(x, P[key + ".g"], P[key + ".beta"])


def _norm_params(block, name, width):
    key = block.p(name)
    return [(key + ".g", np.ones(width), False, None), (key + ".beta", np.zeros(width), False, None)]


class ConvStem(Block):
    def init(self, rng):
        k, c, w = self.spec.size, self.in_width, self.spec.width
        return [(self.p("conv.w"), _he(rng, (w, c, k, k), c * k * k), True, 0)]

    def branch(self, f, P, run):
        k = self.spec.size
        return Features(F.conv2d(f.x, P[self.p("conv.w")], pad=k // 2), "nchw", self.grid_out)


class PatchEmbed(Block):
    layout_out = "tokens"

    def init(self, rng):
        p, c, d = self.spec.size, self.in_width, self.spec.width
        out = [(self.p("proj.w"), _small(rng, (c * p * p, d)), True, 1),
               (self.p("proj.b"), np.zeros(d), False, None)]
        n = self.grid_out[0] * self.grid_out[1] + int(self.spec.cls_token)
        if self.spec.cls_token:
            out.append((self.p("cls"), _small(rng, (1, 1, d)), False, None))
        if self.spec.pos_embed:
            out.append((self.p("pos"), _small(rng, (1, n, d)), False, None))
        return out

    def branch(self, f, P, run):
        t = F.patch_embed(f.x, self.spec.size, P[self.p("proj.w")], P[self.p("proj.b")])
        prefix = 0
        if self.spec.cls_token:
            cls = ops.broadcast_to(P[self.p("cls")], (t.shape[0], 1, t.shape[2]))
            t = ops.concat([cls, t], axis=1)
            prefix = 1
        if self.spec.pos_embed:
            t = t + P[self.p("pos")]
        return Features(t, "tokens", self.grid_out, prefix)


class ConvBasic(Block):
    residual = True

    def init(self, rng):
        w = self.spec.width
        return (_norm_params(self, "bn1", w) + [(self.p("conv1.w"), _he(rng, (w, w, 3, 3), 9 * w), True, 0)]
                + _norm_params(self, "bn2", w) + [(self.p("conv2.w"), _he(rng, (w, w, 3, 3), 9 * w), True, 0)])

    def buffers(self):
        w = self.spec.width
        return {self.p(n): {"mean": np.zeros(w), "var": np.ones(w)} for n in ("bn1", "bn2")}

    def branch(self, f, P, run):
        h = F.conv2d(ops.relu(_bn(self, "bn1", f.x, P, run)), P[self.p("conv1.w")], pad=1)
        h = F.conv2d(ops.relu(_bn(self, "bn2", h, P, run)), P[self.p("conv2.w")], pad=1)
        return Features(h, "nchw", f.grid)


class ConvBottleneck(Block):
    residual = True

    def init(self, rng):
        w = self.spec.width
        m = w // int(self.spec.expansion)
        return (_norm_params(self, "bn1", w) + [(self.p("conv1.w"), _he(rng, (m, w, 1, 1), w), True, 0)]
                + _norm_params(self, "bn2", m) + [(self.p("conv2.w"), _he(rng, (m, m, 3, 3), 9 * m), True, 0)]
                + _norm_params(self, "bn3", m) + [(self.p("conv3.w"), _he(rng, (w, m, 1, 1), m), True, 0)])

    def buffers(self):
        w = self.spec.width
        m = w // int(self.spec.expansion)
        return {self.p("bn1"): {"mean": np.zeros(w), "var": np.ones(w)},
                self.p("bn2"): {"mean": np.zeros(m), "var": np.ones(m)},
                self.p("bn3"): {"mean": np.zeros(m), "var": np.ones(m)}}

    def branch(self, f, P, run):
        h = F.conv2d(ops.relu(_bn(self, "bn1", f.x, P, run)), P[self.p("conv1.w")])
        h = F.conv2d(ops.relu(_bn(self, "bn2", h, P, run)), P[self.p("conv2.w")], pad=1)
        h = F.conv2d(ops.relu(_bn(self, "bn3", h, P, run)), P[self.p("conv3.w")])
        return Features(h, "nchw", f.grid)


class MSABlock(Block):
    residual = True
    layout_out = "tokens"

    def __init__(self, *a):
        super().__init__(*a)
        self.window = effective_window(self.spec.window, *self.grid_out)

    def init(self, rng):
        d = self.spec.width
        out = _norm_params(self, "ln", d)
        for n in ("q", "k", "v"):
            out.append((self.p(f"{n}.w"), _small(rng, (d, d)), True, 1))
        out += [(self.p("o.w"), _small(rng, (d, d)), True, 1), (self.p("o.b"), np.zeros(d), False, None)]
        if self.window.is_local:
            size = F.relative_bias_size(self.window)
            out.append((self.p("rel_bias"), _small(rng, (self.spec.heads, size)), False, None))
        return out

    def attention_params(self, P) -> F.AttentionParams:
        heads = self.spec.heads
        return F.AttentionParams(
            P[self.p("q.w")], P[self.p("k.w")], P[self.p("v.w")], P[self.p("o.w")],
            heads, self.spec.width // heads, self.window, P[self.p("o.b")],
            P.get(self.p("rel_bias")))

    def branch(self, f, P, run):
        h = _ln(self, "ln", f.x, P)
        z = F.msa_forward(h, self.attention_params(P), grid=f.grid, n_prefix=f.n_prefix)
        return Features(z, "tokens", f.grid, f.n_prefix)


class MLPBlock(Block):
    residual = True
    layout_out = "tokens"

    def init(self, rng):
        d = self.spec.width
        hdim = int(round(d * self.spec.expansion))
        return _norm_params(self, "ln", d) + [
            (self.p("fc1.w"), _small(rng, (d, hdim)), True, 1), (self.p("fc1.b"), np.zeros(hdim), False, None),
            (self.p("fc2.w"), _small(rng, (hdim, d)), True, 1), (self.p("fc2.b"), np.zeros(d), False, None)]

    def branch(self, f, P, run):
        h = _ln(self, "ln", f.x, P)
        h = F.gelu(F.linear(h, P[self.p("fc1.w")], P[self.p("fc1.b")]))
        h = F.linear(h, P[self.p("fc2.w")], P[self.p("fc2.b")])
        return Features(h, "tokens", f.grid, f.n_prefix)


class Subsample(Block):
    def init(self, rng):
        c, w = self.in_width, self.spec.width
        return [(self.p("conv.w"), _he(rng, (w, c, 2, 2), 4 * c), True, 0),
                (self.p("conv.b"), np.zeros(w), False, None)]

    def branch(self, f, P, run):
        layout = f.layout
        m = f.nchw()
        y = F.conv2d(m.x, P[self.p("conv.w")], P[self.p("conv.b")], stride=2)
        return Features(y, "nchw", self.grid_out).as_layout(layout)


class BoxBlur(Block):
    def branch(self, f, P, run):
        layout = f.layout
        m = f.nchw()
        return Features(F.box_blur(m.x, self.spec.size), "nchw", m.grid).as_layout(layout)


BLOCK_TYPES = {
    "ConvStem": ConvStem, "PatchEmbed": PatchEmbed, "ConvBasic": ConvBasic,
    "ConvBottleneck": ConvBottleneck, "MSA": MSABlock, "MLP": MLPBlock,
    "Subsample": Subsample, "BoxBlur": BoxBlur,
}


class Model:
    """Parameters plus a forward closure; block outputs are exposed by path."""

    def __init__(self, spec: ModelSpec, seed: int = 0):
        self.spec = spec.validate()
        self.seed = seed
        rng = np.random.default_rng(seed)
        grids = spec.grids()
        side = spec.image_size
        width, layout = spec.in_channels, "nchw"
        grid = (side, side)
        self.blocks: list[Block] = []
        for path in spec.block_paths():
            bspec = spec.block_at(path)
            cls = BLOCK_TYPES[bspec.kind]
            blk = cls(path, bspec, width, grid, grids[path], layout)
            self.blocks.append(blk)
            width, grid = bspec.width, grids[path]
            if bspec.kind not in ("Subsample", "BoxBlur"):
                layout = cls.layout_out
        self.final_layout = layout
        segments, self.decay, self.filter_axes = [], set(), {}
        self.buffers: dict = {}
        for blk in self.blocks:
            for name, arr, decay, axis in blk.init(rng):
                segments.append((name, arr))
                if decay:
                    self.decay.add(name)
                self.filter_axes[name] = axis
            if hasattr(blk, "buffers"):
                self.buffers.update(blk.buffers())
        classes = spec.head.classes
        # the final norm closes the last stage; a stem-only spec pools the stem output directly
        self.head_norm = bool(spec.stages)
        if self.head_norm:
            segments += [("head.norm.g", np.ones(width)), ("head.norm.beta", np.zeros(width))]
            self.filter_axes.update({"head.norm.g": None, "head.norm.beta": None})
            if layout == "nchw":
                self.buffers["head.norm"] = {"mean": np.zeros(width), "var": np.ones(width)}
        segments += [("head.fc.w", _small(rng, (width, classes))), ("head.fc.b", np.zeros(classes))]
        self.decay.add("head.fc.w")
        self.filter_axes.update({"head.fc.w": 1, "head.fc.b": None})
        self.params = ParamVector(segments)
        self.width = width

    # -- introspection --------------------------------------------------------
    @property
    def num_params(self) -> int:
        return self.params.total_dim

    def block_paths(self) -> list:
        return [b.path for b in self.blocks]

    def block(self, path: str) -> Block:
        for b in self.blocks:
            if b.path == path:
                return b
        raise KeyError(path)

    def residual_units(self) -> list:
        return [b.path for b in self.blocks if b.spec.kind in RESIDUAL_KINDS]

    def block_kind(self, path: str) -> str:
        return self.block(path).spec.kind

    def path(self, stage: int, index: int) -> str:
        """Hook path of block ``index`` in 1-based ``stage``."""
        path = f"s{stage}.b{index}"
        self.block(path)
        return path

    def stage_of(self, path: str) -> int:
        return 0 if path == "stem" else int(path.split(".")[0][1:])

    # -- forward ------------------------------------------------------------------
    def _params(self, params):
        if params is None:
            params = self.params
        if isinstance(params, ParamVector):
            return {k: Tensor(v) for k, v in params.items()}
        missing = [k for k in self.params if k not in params]
        if missing:
            full = {k: Tensor(v) for k, v in self.params.items()}
            full.update(params)
            return full
        return params

    def forward(self, x, params=None, *, train: bool = False, capture: bool = False,
                ablate=(), update_stats: bool = True):
        """Map an image batch (B, C, H, W) to logits (B, classes)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels or x.shape[2:] != (
                self.spec.image_size, self.spec.image_size):
            raise ValueError(f"expected images (B, {self.spec.in_channels}, {self.spec.image_size}, "
                             f"{self.spec.image_size}), got {x.shape}")
        ablate = frozenset(ablate)
        bad = [p for p in ablate if p not in self.residual_units()]
        if bad:
            raise SpecError(bad[0], "unit is not on a residual branch; removal undefined")
        P = self._params(params)
        if not update_stats:
            buffers = {k: dict(v, update=False) for k, v in self.buffers.items()}
        else:
            buffers = self.buffers
        run = RunState(train, update_stats, ablate, buffers)
        f = Features(x, "nchw", (x.shape[2], x.shape[3]))
        acts = {}
        for blk in self.blocks:
            f = blk(f, P, run)
            if capture:
                acts[blk.path] = f
        logits = self._head(f, P, run)
        return (logits, acts) if capture else logits

    def _head(self, f, P, run):
        if not self.head_norm:
            return F.classifier_head(f.x, P["head.fc.w"], P["head.fc.b"], self.spec.head.mode,
                                     has_cls=f.n_prefix > 0)
        if f.layout == "nchw":
            h = F.batch_norm(f.x, P["head.norm.g"], P["head.norm.beta"],
                             running=run.buffers["head.norm"], training=run.train)
            h = ops.relu(h)
            return F.classifier_head(h, P["head.fc.w"], P["head.fc.b"], "gap")
        h = F.layer_norm(f.x, P["head.norm.g"], P["head.norm.beta"])
        return F.classifier_head(h, P["head.fc.w"], P["head.fc.b"], self.spec.head.mode,
                                 has_cls=f.n_prefix > 0)

    __call__ = forward

    def predict(self, images: np.ndarray, batch_size: int = 256, ablate=()) -> np.ndarray:
        """Eval-mode logits as a numpy array."""
        outs = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                outs.append(self.forward(images[i:i + batch_size], train=False, ablate=ablate).data)
        return np.concatenate(outs) if outs else np.zeros((0, self.spec.head.classes))

    def activations(self, images: np.ndarray, paths=None, batch_size: int = 256) -> dict:
        """Eval-mode block outputs as (B, C, h, w) arrays keyed by path."""
        paths = list(paths) if paths is not None else self.block_paths()
        chunks = {p: [] for p in paths}
        with no_grad():
            for i in range(0, len(images), batch_size):
                _, acts = self.forward(images[i:i + batch_size], train=False, capture=True)
                for p in paths:
                    chunks[p].append(acts[p].spatial_map())
        return {p: np.concatenate(v) for p, v in chunks.items()}

    # -- state -----------------------------------------------------------------------
    def state(self) -> tuple:
        return self.params.copy(), {k: {s: a.copy() for s, a in v.items()} for k, v in self.buffers.items()}

    def load_state(self, params: ParamVector, buffers: dict | None = None):
        if params.names() != self.params.names():
            raise ValueError("parameter layout does not match this model")
        for k, v in params.items():
            if v.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}")
            self.params[k] = v.copy()
        if buffers is not None:
            for k, v in buffers.items():
                for s, a in v.items():
                    self.buffers[k][s] = np.array(a, dtype=np.float64)


def build_model(spec: ModelSpec, seed: int = 0) -> Model:
    return Model(spec, seed)


def is_conv_path(model: Model, path: str) -> bool:
    return model.block_kind(path) in CONV_KINDS
