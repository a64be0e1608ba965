"""Functional building blocks: convolution, self-attention, smoothing, heads."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor, as_tensor

BN_EPS = 1e-5
LN_EPS = 1e-5
_MASKED = -1e30


# ---------------------------------------------------------------------------
# windows
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Window:
    """Attention extent: ``global``, ``conv`` (centered k x k) or ``partition``."""

    mode: str = "global"
    size: int = 0

    def __post_init__(self):
        if self.mode not in ("global", "conv", "partition"):
            raise ValueError(f"unknown window mode {self.mode!r}")
        if self.mode != "global" and self.size < 1:
            raise ValueError(f"{self.mode} window needs a positive size")

    @property
    def is_local(self) -> bool:
        return self.mode != "global"

    def to_dict(self) -> dict:
        return {"mode": self.mode, "size": self.size}

    @classmethod
    def from_dict(cls, d) -> Window:
        if isinstance(d, Window):
            return d
        if isinstance(d, str):
            return cls.parse(d)
        return cls(d["mode"], int(d.get("size", 0)))

    @classmethod
    def parse(cls, text: str) -> Window:
        text = text.strip().lower()
        if text == "global":
            return cls()
        for mode in ("conv", "partition"):
            if text.startswith(mode):
                return cls(mode, int(text[len(mode):]))
        raise ValueError(f"cannot parse window {text!r}")

    def __str__(self):
        return "global" if self.mode == "global" else f"{self.mode}{self.size}"


GLOBAL = Window()


def _check_window(grid_h: int, grid_w: int, window: Window):
    if window.mode == "conv":
        if window.size % 2 == 0:
            raise ValueError(f"convolutional window needs an odd size, got {window.size}")
        if window.size > max(grid_h, grid_w):
            raise ValueError(f"window {window.size} larger than token grid {grid_h}x{grid_w}")
    elif window.mode == "partition":
        s = window.size
        if s > grid_h or s > grid_w:
            raise ValueError(f"window {s} larger than token grid {grid_h}x{grid_w}")
        if grid_h % s or grid_w % s:
            raise ValueError(f"token grid {grid_h}x{grid_w} not divisible by window {s}")


def local_attention_sets(grid_h: int, grid_w: int, window: Window) -> list:
    """Token indices (row-major) that each token attends to."""
    _check_window(grid_h, grid_w, window)
    n = grid_h * grid_w
    if window.mode == "global":
        return [np.arange(n) for _ in range(n)]
    ys, xs = np.divmod(np.arange(n), grid_w)
    sets = []
    for y, x in zip(ys, xs):
        if window.mode == "conv":
            r = window.size // 2
            keep = (np.abs(ys - y) <= r) & (np.abs(xs - x) <= r)
        else:
            s = window.size
            keep = (ys // s == y // s) & (xs // s == x // s)
        sets.append(np.flatnonzero(keep))
    return sets


@lru_cache(maxsize=None)
def attention_mask(grid_h: int, grid_w: int, window: Window) -> np.ndarray:
    """Boolean (N, N) matrix; row q marks the keys query q may attend to."""
    n = grid_h * grid_w
    mask = np.zeros((n, n), dtype=bool)
    for q, members in enumerate(local_attention_sets(grid_h, grid_w, window)):
        mask[q, members] = True
    mask.flags.writeable = False
    return mask


@lru_cache(maxsize=None)
def _mask_bias(grid_h, grid_w, window):
    bias = np.where(attention_mask(grid_h, grid_w, window), 0.0, _MASKED)
    bias.flags.writeable = False
    return bias


@lru_cache(maxsize=None)
def _partition_index(grid_h, grid_w, s):
    ids = np.arange(grid_h * grid_w).reshape(grid_h // s, s, grid_w // s, s)
    perm = ids.transpose(0, 2, 1, 3).reshape(-1, s * s)
    inv = np.argsort(perm.ravel())
    perm.flags.writeable = False
    inv.flags.writeable = False
    return perm, inv


def relative_bias_size(window: Window) -> int:
    """Number of relative offsets a local window can see."""
    if window.mode == "partition":
        return (2 * window.size - 1) ** 2
    if window.mode == "conv":
        return window.size ** 2
    return 0


@lru_cache(maxsize=None)
def _relative_index(grid_h, grid_w, window):
    if window.mode == "partition":
        s = window.size
        yy, xx = np.divmod(np.arange(s * s), s)
        dy = yy[:, None] - yy[None, :] + s - 1
        dx = xx[:, None] - xx[None, :] + s - 1
        idx = dy * (2 * s - 1) + dx
    else:
        k = window.size
        r = k // 2
        yy, xx = np.divmod(np.arange(grid_h * grid_w), grid_w)
        dy = np.clip(yy[None, :] - yy[:, None] + r, 0, k - 1)
        dx = np.clip(xx[None, :] - xx[:, None] + r, 0, k - 1)
        idx = dy * k + dx
    idx = np.ascontiguousarray(idx)
    idx.flags.writeable = False
    return idx


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------
@dataclass
class AttentionParams:
    w_q: Tensor  # (D, heads * head_dim), head h owns columns h*d:(h+1)*d
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor  # (heads * head_dim, D)
    heads: int
    head_dim: int
    window: Window = GLOBAL
    b_o: Tensor | None = None
    rel_bias: Tensor | None = None  # (heads, relative_bias_size(window))

    @property
    def dim(self) -> int:
        return self.heads * self.head_dim


def msa_forward(x, p: AttentionParams, grid=None, n_prefix: int = 0,
                return_attention: bool = False):
    """Multi-head self-attention over a token grid.

    ``x`` is (N, D) or (B, N, D); the first ``n_prefix`` tokens (a class token)
    sit outside the spatial grid and are only allowed with global windows.
    """
    x = as_tensor(x)
    squeeze = x.ndim == 2
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    b, n, dim = x.shape
    heads, d = p.heads, p.head_dim
    if dim != p.dim:
        raise ValueError(f"token dim {dim} != heads*head_dim = {heads}*{d}")
    if p.w_q.shape != (dim, heads * d) or p.w_o.shape != (heads * d, dim):
        raise ValueError("projection shapes do not match D == H*d")
    if grid is None:
        side = int(round(math.sqrt(n - n_prefix)))
        grid = (side, (n - n_prefix) // max(side, 1))
    gh, gw = grid
    if gh * gw + n_prefix != n:
        raise ValueError(f"{n} tokens do not form grid {gh}x{gw} (+{n_prefix} prefix)")
    window = p.window
    if window.is_local and n_prefix:
        raise ValueError("class tokens are only supported with global attention")
    _check_window(gh, gw, window)
    scale = 1.0 / math.sqrt(d)

    def split(w):
        return ops.transpose(ops.reshape(x @ w, (b, n, heads, d)), (0, 2, 1, 3))

    q, k, v = split(p.w_q), split(p.w_k), split(p.w_v)
    if window.mode == "partition":
        s = window.size
        perm, inv = _partition_index(gh, gw, s)
        q, k, v = (ops.take(t, perm, axis=2) for t in (q, k, v))  # (B,H,nW,s*s,d)
        logits = (q @ k.swapaxes(-1, -2)) * scale
        if p.rel_bias is not None:
            bias = ops.take(p.rel_bias, _relative_index(gh, gw, window), axis=1)
            logits = logits + ops.reshape(bias, (1, heads, 1, s * s, s * s))
        attn = ops.softmax(logits, axis=-1)
        z = ops.reshape(attn @ v, (b, heads, n, d))
        z = ops.take(z, inv, axis=2)
    else:
        logits = (q @ k.swapaxes(-1, -2)) * scale
        if window.mode == "conv":
            logits = logits + _mask_bias(gh, gw, window)
            if p.rel_bias is not None:
                bias = ops.take(p.rel_bias, _relative_index(gh, gw, window), axis=1)
                logits = logits + ops.reshape(bias, (1, heads, n, n))
        attn = ops.softmax(logits, axis=-1)
        z = attn @ v
    z = ops.reshape(ops.transpose(z, (0, 2, 1, 3)), (b, n, heads * d))
    out = z @ p.w_o
    if p.b_o is not None:
        out = out + p.b_o
    if squeeze:
        out = ops.reshape(out, (n, dim))
    if return_attention:
        return out, _dense_attention(attn.data, window, gh, gw, n)
    return out


def _dense_attention(a, window, gh, gw, n):
    if window.mode != "partition":
        return a
    perm, _ = _partition_index(gh, gw, window.size)
    b, h = a.shape[:2]
    dense = np.zeros((b, h, n, n))
    for w_i, members in enumerate(perm):
        dense[:, :, members[:, None], members[None, :]] = a[:, :, w_i]
    return dense


# ---------------------------------------------------------------------------
# convolution and smoothing
# ---------------------------------------------------------------------------
def conv_output_size(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


@lru_cache(maxsize=None)
def _im2col_index(c, h, w, kh, kw, stride, pad):
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(w, kw, stride, pad)
    if ho <= 0 or wo <= 0:
        raise ValueError(f"conv produces empty output for input {h}x{w}, kernel {kh}x{kw}")
    iy = (np.arange(ho) * stride - pad)[None, :] + np.arange(kh)[:, None]  # (kh, ho)
    ix = (np.arange(wo) * stride - pad)[None, :] + np.arange(kw)[:, None]  # (kw, wo)
    iy = iy[:, None, :, None]
    ix = ix[None, :, None, :]
    valid = (iy >= 0) & (iy < h) & (ix >= 0) & (ix < w)
    spatial = np.where(valid, iy * w + ix, -1)  # (kh, kw, ho, wo)
    chan = np.arange(c)[:, None, None, None, None] * (h * w)
    flat = np.where(spatial[None] >= 0, chan + spatial[None], c * h * w)
    idx = np.ascontiguousarray(flat.reshape(c * kh * kw, ho * wo))
    idx.flags.writeable = False
    return idx, ho, wo


def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0):
    """Cross-correlation of (B, C, H, W) or (C, H, W) input with (O, C, k, k) kernels.

    Built from a gather (im2col with an appended zero slot for padding) and a
    matrix product, so it is differentiable to any order.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    squeeze = x.ndim == 3
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    o, c2, kh, kw = weight.shape
    if c != c2:
        raise ValueError(f"input has {c} channels, kernel expects {c2}")
    idx, ho, wo = _im2col_index(c, h, w, kh, kw, stride, pad)
    flat = ops.reshape(x, (b, c * h * w))
    if pad:
        flat = ops.concat([flat, Tensor(np.zeros((b, 1)))], axis=1)
    cols = ops.take(flat, idx, axis=1)  # (B, C*kh*kw, ho*wo)
    out = ops.reshape(weight, (o, c * kh * kw)) @ cols
    if bias is not None:
        out = out + ops.reshape(as_tensor(bias), (o, 1))
    out = ops.reshape(out, (b, o, ho, wo))
    return ops.reshape(out, out.shape[1:]) if squeeze else out


@lru_cache(maxsize=None)
def _box_index(h, w, k):
    offs = np.arange(-(k // 2), k - k // 2)
    ys, xs = np.divmod(np.arange(h * w), w)
    ny = ys[None, None, :] + offs[:, None, None]
    nx = xs[None, None, :] + offs[None, :, None]
    valid = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    idx = np.where(valid, ny * w + nx, h * w).reshape(k * k, h * w)
    count = valid.reshape(k * k, h * w).sum(axis=0).astype(np.float64)
    idx = np.ascontiguousarray(idx)
    idx.flags.writeable = False
    return idx, 1.0 / count


def box_blur(x, k: int):
    """Non-trainable k x k mean filter over in-bounds neighbors, per channel."""
    if k < 1:
        raise ValueError("blur extent must be >= 1")
    x = as_tensor(x)
    if k == 1:
        return x
    shape = x.shape
    h, w = shape[-2:]
    lead = shape[:-2]
    idx, inv_count = _box_index(h, w, k)
    flat = ops.reshape(x, (-1, h * w) if lead else (1, h * w))
    m = flat.shape[0]
    flat = ops.concat([flat, Tensor(np.zeros((m, 1)))], axis=1)
    nb = ops.take(flat, idx, axis=1)  # (M, k*k, HW)
    out = ops.sum(nb, axis=1) * inv_count
    return ops.reshape(out, shape)


# ---------------------------------------------------------------------------
# embedding, heads, normalization
# ---------------------------------------------------------------------------
def linear(x, weight, bias=None):
    out = as_tensor(x) @ weight
    return out + bias if bias is not None else out


def patch_embed(x, patch: int, weight, bias=None):
    """(B, C, H, W) image -> (B, (H/p)(W/p), D) tokens; weight is (C*p*p, D)."""
    x = as_tensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = ops.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    if h % patch or w % patch:
        raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
    gh, gw = h // patch, w // patch
    t = ops.reshape(x, (b, c, gh, patch, gw, patch))
    t = ops.transpose(t, (0, 2, 4, 1, 3, 5))
    t = ops.reshape(t, (b, gh * gw, c * patch * patch))
    out = linear(t, weight, bias)
    return ops.reshape(out, out.shape[1:]) if squeeze else out


def classifier_head(features, weight, bias=None, mode: str = "gap", has_cls: bool = False):
    """Logits from tokens (B, N, D) or a feature map (B, C, H, W)."""
    f = as_tensor(features)
    if mode == "cls":
        if not has_cls or f.ndim != 3:
            raise ValueError("CLS head requires a prepended class token")
        pooled = ops.reshape(ops.getitem(f, (slice(None), slice(0, 1))), (f.shape[0], f.shape[2]))
    elif mode == "gap":
        if f.ndim == 4:
            pooled = ops.mean(f, axis=(2, 3))
        else:
            if has_cls:
                f = ops.getitem(f, (slice(None), slice(1, None)))
            pooled = ops.mean(f, axis=1)
    else:
        raise ValueError(f"unknown head mode {mode!r}")
    return linear(pooled, weight, bias)


def layer_norm(x, gamma=None, beta=None, axis=-1, eps: float = LN_EPS):
    x = as_tensor(x)
    mu, var = ops.moments(x, axis)
    y = (x - mu) * ops.power(var + eps, -0.5)
    if gamma is not None:
        y = y * gamma
    if beta is not None:
        y = y + beta
    return y


def batch_norm(x, gamma=None, beta=None, running=None, training: bool = True,
               momentum: float = 0.1, eps: float = BN_EPS):
    """Per-channel normalization of (B, C, H, W) over batch and space.

    ``running`` is a dict with ``mean``/``var`` arrays, updated in place when
    ``training``; in eval mode those statistics are used instead.
    """
    x = as_tensor(x)
    b, c = x.shape[:2]
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        if b < 2:
            raise ValueError("batch norm in training mode needs a batch of at least 2")
        mu, var = ops.moments(x, axes)
        if running is not None and running.get("update", True):
            n = x.size // c
            running["mean"] *= 1.0 - momentum
            running["mean"] += momentum * mu.data.reshape(c)
            running["var"] *= 1.0 - momentum
            running["var"] += momentum * var.data.reshape(c) * n / max(n - 1, 1)
        y = (x - mu) * ops.power(var + eps, -0.5)
    else:
        if running is None:
            raise ValueError("eval-mode batch norm needs running statistics")
        inv = 1.0 / np.sqrt(running["var"] + eps)
        y = (x - running["mean"].reshape(bshape)) * inv.reshape(bshape)
    if gamma is not None:
        y = y * ops.reshape(as_tensor(gamma), bshape)
    if beta is not None:
        y = y + ops.reshape(as_tensor(beta), bshape)
    return y


def normalize(x, kind: str, gamma=None, beta=None, **kw):
    if kind == "layer":
        return layer_norm(x, gamma, beta, **kw)
    if kind == "batch":
        return batch_norm(x, gamma, beta, **kw)
    raise ValueError(f"unknown normalization {kind!r}")


softmax = ops.softmax
relu = ops.relu
gelu = ops.gelu
