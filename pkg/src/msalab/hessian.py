"""Hessian eigen-spectra by deflated power iteration, NEP/APE and loss slices."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .autodiff import ParamVector, hvp, no_grad
from .autodiff.tensor import Tensor
from .train.losses import l2_penalty, loss_closure, nll

log = logging.getLogger(__name__)

DEGENERATE_NORM = 1e-12
SPECTRUM_HEADER = ("checkpoint", "batch", "rank", "eigenvalue", "residual", "iters")


class Eigenpair(NamedTuple):
    value: float
    vector: ParamVector
    iters: int
    residual: float  # ||Hv - lambda v|| for unit v
    degenerate: bool = False


def _orthogonalize(v: ParamVector, basis) -> ParamVector:
    for u in basis:
        v = v - u * v.dot(u)
    return v


def top_k_eigs(closure: Callable, theta: ParamVector, k: int = 5, max_iters: int = 100,
               tol: float = 1e-3, seed: int = 0) -> list:
    """Top-``k`` eigenpairs (by magnitude) of the Hessian of ``closure`` at ``theta``.

    Each pair is found by power iteration on Hv, projected orthogonal to the
    pairs already found (Gram-Schmidt deflation).  An iterate counts as
    converged once the Rayleigh quotient changes by less than ``tol``
    relative to its size and the deflated residual ||P(Hv) - lambda v|| is at
    most ``tol * |lambda|``.  The recorded residual is the undeflated
    ||Hv - lambda v||, which also carries any error left in earlier pairs.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > theta.total_dim:
        raise ValueError(f"k={k} exceeds the parameter dimension {theta.total_dim}")
    rng = np.random.default_rng(seed)
    found: list[Eigenpair] = []
    for _ in range(k):
        basis = [p.vector for p in found]
        v = _orthogonalize(theta.unflatten(rng.standard_normal(theta.total_dim)), basis)
        v = v * (1.0 / v.norm())
        lam_prev, pair = None, None
        for it in range(1, max_iters + 1):
            hv = hvp(closure, theta, v)
            lam = v.dot(hv)
            residual = (hv - v * lam).norm()
            nxt = _orthogonalize(hv, basis)
            norm = nxt.norm()
            pair = Eigenpair(lam, v, it, residual)
            if norm < DEGENERATE_NORM:
                break
            done = (lam_prev is not None and abs(lam - lam_prev) < tol * abs(lam)
                    and (nxt - v * lam).norm() <= tol * abs(lam))
            lam_prev = lam
            if done:
                break
            v = nxt * (1.0 / norm)
        if norm < DEGENERATE_NORM:
            # H annihilates the remaining subspace: report zeros from here on
            zero = theta.zeros_like()
            found.append(Eigenpair(0.0, v, pair.iters, pair.residual, True))
            found.extend(Eigenpair(0.0, zero, 0, 0.0, True) for _ in range(k - len(found)))
            break
        found.append(pair)
    return sorted(found, key=lambda p: -abs(p.value))


def dense_hessian(closure: Callable, theta: ParamVector) -> np.ndarray:
    """Dense Hessian from dim Hessian-vector products (small models only)."""
    n = theta.total_dim
    H = np.empty((n, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        H[:, i] = hvp(closure, theta, theta.unflatten(e)).flatten()
    return 0.5 * (H + H.T)


# ---------------------------------------------------------------------------
# spectra over mini-batches
# ---------------------------------------------------------------------------
@dataclass
class SpectrumRecord:
    checkpoint: str
    batch: int
    eigenvalues: list = field(default_factory=list)
    iters: list = field(default_factory=list)
    residuals: list = field(default_factory=list)
    degenerate: bool = False
    warning: str = ""


def _restricted_closure(model, x, y, weight_decay, wrt, base):
    full = loss_closure(model, x, y, weight_decay)
    if wrt is None:
        return full
    fixed = {k: Tensor(v) for k, v in base.items() if k not in wrt}

    def closure(P):
        return full({**fixed, **P})
    return closure


def spectrum(model, data, batch_size: int = 16, k: int = 5, sample_fraction: float = 0.1,
             weight_decay: float = 5e-2, seed: int = 0, max_iters: int = 100, tol: float = 1e-3,
             checkpoint: str = "", wrt=None, params: ParamVector | None = None) -> list:
    """Per-batch top-k eigenvalues of the regularized NLL on a random sample.

    ``wrt`` restricts the Hessian to the named parameters.  A trailing batch
    with fewer than two samples is skipped and reported with a warning.
    """
    if len(data) == 0:
        raise ValueError("dataset is empty")
    params = model.params if params is None else params
    theta = params if wrt is None else params.subset(wrt)
    rng = np.random.default_rng(seed)
    m = max(1, int(math.floor(sample_fraction * len(data) + 1e-9)))
    idx = rng.permutation(len(data))[:m]
    records = []
    for b, start in enumerate(range(0, m, batch_size)):
        sel = np.sort(idx[start:start + batch_size])
        if len(sel) < 2:
            msg = f"batch {b} has {len(sel)} sample(s); skipped"
            log.warning(msg)
            records.append(SpectrumRecord(checkpoint, b, warning=msg))
            continue
        closure = _restricted_closure(model, data.images[sel], data.labels[sel], weight_decay,
                                      None if wrt is None else set(wrt), params)
        pairs = top_k_eigs(closure, theta, k, max_iters, tol, seed=seed * 100003 + b)
        records.append(SpectrumRecord(checkpoint, b, [p.value for p in pairs], [p.iters for p in pairs],
                                      [p.residual for p in pairs], any(p.degenerate for p in pairs)))
    return records


def eigenvalues_of(spec) -> np.ndarray:
    """Flatten records (or any iterable of numbers) into one array."""
    vals = []
    for item in spec:
        if isinstance(item, SpectrumRecord):
            vals.extend(item.eigenvalues)
        else:
            vals.append(float(item))
    return np.asarray(vals, dtype=np.float64)


def nep(spec) -> float:
    """Fraction of collected eigenvalues that are negative."""
    vals = eigenvalues_of(spec)
    if vals.size == 0:
        raise ValueError("empty spectrum")
    return float(np.count_nonzero(vals < 0) / vals.size)


class NoPositiveEigenvalues(ValueError):
    pass


def ape(spec) -> float:
    """Mean of the positive eigenvalues."""
    vals = eigenvalues_of(spec)
    pos = vals[vals > 0]
    if pos.size == 0:
        raise NoPositiveEigenvalues("spectrum has no positive eigenvalues")
    return float(pos.mean())


def spectrum_histogram(spec, bins: int = 64) -> tuple:
    vals = eigenvalues_of(spec)
    lim = float(np.max(np.abs(vals))) if vals.size else 1.0
    lim = lim or 1.0
    return np.histogram(vals, bins=bins, range=(-lim, lim))


def spectrum_rows(records) -> list:
    rows = []
    for r in records:
        for rank, (lam, res, it) in enumerate(zip(r.eigenvalues, r.residuals, r.iters)):
            rows.append([r.checkpoint, r.batch, rank, lam, res, it])
    return rows


# ---------------------------------------------------------------------------
# loss landscapes
# ---------------------------------------------------------------------------
def _default_axis(a: np.ndarray):
    if a.ndim == 4:
        return 0
    if a.ndim == 2:
        return 1
    return None


def filter_normalized_direction(theta: ParamVector, seed: int = 0, filter_axes: dict | None = None
                                ) -> ParamVector:
    """Gaussian direction with each filter rescaled to its parameter filter's norm.

    Conv kernels (out, in, kh, kw) group by output channel; linear weights
    stored (in, out) group by output unit; other tensors form one group.
    Groups whose parameters are all zero get a zero direction.
    """
    rng = np.random.default_rng(seed)
    out = []
    for name, p in theta.items():
        d = rng.standard_normal(p.shape)
        axis = filter_axes.get(name, _default_axis(p)) if filter_axes else _default_axis(p)
        if axis is None:
            pn, dn = np.linalg.norm(p), np.linalg.norm(d)
            d = d * (pn / dn) if pn > 0 and dn > 0 else np.zeros_like(d)
        else:
            red = tuple(i for i in range(p.ndim) if i != axis)
            pn = np.sqrt(np.sum(p * p, axis=red, keepdims=True))
            dn = np.sqrt(np.sum(d * d, axis=red, keepdims=True))
            scale = np.where((pn > 0) & (dn > 0), pn / np.where(dn > 0, dn, 1.0), 0.0)
            d = d * scale
        out.append((name, d))
    return ParamVector(out)


@dataclass
class LandscapeGrid:
    d1: ParamVector
    d2: ParamVector
    alphas: np.ndarray
    betas: np.ndarray
    losses: np.ndarray

    def csv_rows(self) -> tuple:
        header = ["alpha\\beta"] + [float(b) for b in self.betas]
        rows = [[float(a)] + [float(v) for v in row] for a, row in zip(self.alphas, self.losses)]
        return header, rows


def dataset_loss(model, data, params: ParamVector, weight_decay: float, batch_size: int = 256) -> float:
    """Regularized NLL over a whole dataset (eval-mode normalization)."""
    P = {k: Tensor(v) for k, v in params.items()}
    total = 0.0
    with no_grad():
        for i in range(0, len(data), batch_size):
            y = data.labels[i:i + batch_size]
            logits = model.forward(data.images[i:i + batch_size], P, train=False)
            total += nll(logits, y).item() * len(y)
        pen = l2_penalty(P, sorted(model.decay)).item() if weight_decay else 0.0
    return total / len(data) + 0.5 * weight_decay * pen


def loss_surface(model, data, d1: ParamVector, d2: ParamVector, alphas, betas,
                 weight_decay: float = 5e-2, batch_size: int = 256, loss_fn=None) -> LandscapeGrid:
    """Loss at theta + a*d1 + b*d2 over the grid; the model is left untouched.

    ``loss_fn(params) -> float`` overrides the default dataset loss.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    if alphas.size == 0 or betas.size == 0:
        raise ValueError("landscape grid is empty")
    theta = model.params.copy()
    if loss_fn is None:
        def loss_fn(p):
            return dataset_loss(model, data, p, weight_decay, batch_size)
    losses = np.empty((alphas.size, betas.size))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            point = theta + d1 * float(a) + d2 * float(b) if (a or b) else theta
            try:
                val = float(loss_fn(point))
            except FloatingPointError:
                val = math.inf
            losses[i, j] = val if math.isfinite(val) else math.inf
    return LandscapeGrid(d1, d2, alphas, betas, losses)
