"""Feature-map statistics: variance, CKA similarity, lesions and calibration."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fourier import accuracy


# ---------------------------------------------------------------------------
# variance
# ---------------------------------------------------------------------------
def map_variance(maps: np.ndarray) -> float:
    """Spatial variance per sample and channel, averaged over both."""
    maps = np.asarray(maps, dtype=np.float64)
    return float(np.var(maps, axis=(-2, -1)).mean())


@dataclass
class VarianceProfile:
    layers: list
    variances: list

    def rows(self) -> list:
        return [[l, v] for l, v in zip(self.layers, self.variances)]

    def changes(self) -> dict:
        """Variance ratio of each layer to the layer before it."""
        return {b: vb / va if va > 0 else math.inf
                for (a, va), (b, vb) in zip(zip(self.layers, self.variances),
                                            zip(self.layers[1:], self.variances[1:]))}


def variance_profile(model, images, paths=None, batch_size: int = 256) -> VarianceProfile:
    """Channel-averaged spatial variance of the input and each block output."""
    acts = model.activations(images, paths, batch_size=batch_size)
    layers, values = ["input"], [map_variance(images)]
    for path, maps in acts.items():
        layers.append(path)
        values.append(map_variance(maps))
    return VarianceProfile(layers, values)


# ---------------------------------------------------------------------------
# CKA
# ---------------------------------------------------------------------------
class UndefinedSimilarity(ValueError):
    pass


def _centered_gram(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64).reshape(len(X), -1)
    Xc = X - X.mean(axis=0, keepdims=True)
    return Xc @ Xc.T


def linear_cka(X, Y) -> float:
    """||Y^T X||_F^2 / (||X^T X||_F ||Y^T Y||_F) on column-centered data."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if len(X) != len(Y) or len(X) < 2:
        raise ValueError("X and Y need the same sample count n >= 2")
    K, L = _centered_gram(X), _centered_gram(Y)
    kk, ll = np.sum(K * K), np.sum(L * L)
    if kk <= 0 or ll <= 0:
        raise UndefinedSimilarity("zero-variance representation")
    return float(min(max(np.sum(K * L) / math.sqrt(kk * ll), 0.0), 1.0))


def unbiased_hsic(K: np.ndarray, L: np.ndarray) -> float:
    """Unbiased HSIC estimator of two n x n Gram matrices (n >= 4)."""
    n = len(K)
    if n < 4:
        raise ValueError("unbiased HSIC needs at least 4 samples")
    K = K.copy()
    L = L.copy()
    np.fill_diagonal(K, 0.0)
    np.fill_diagonal(L, 0.0)
    ones = np.ones(n)
    kl1 = K @ (L @ ones)
    val = (np.sum(K * L) + K.sum() * L.sum() / ((n - 1) * (n - 2)) - 2.0 / (n - 2) * ones @ kl1)
    return float(val / (n * (n - 3)))


def minibatch_cka(batches_x, batches_y) -> float:
    """CKA from unbiased HSIC estimates summed over mini-batches, clipped to [0, 1]."""
    xy = xx = yy = 0.0
    for X, Y in zip(batches_x, batches_y):
        K = X @ X.T
        L = Y @ Y.T
        xy += unbiased_hsic(K, L)
        xx += unbiased_hsic(K, K)
        yy += unbiased_hsic(L, L)
    if xx <= 0 or yy <= 0:
        raise UndefinedSimilarity("zero-variance representation")
    return float(min(max(xy / math.sqrt(xx * yy), 0.0), 1.0))


@dataclass
class CKAMatrix:
    layers: list
    values: np.ndarray
    flagged: list = field(default_factory=list)
    estimator: str = "linear kernel, unbiased HSIC averaged over mini-batches"

    def rows(self) -> list:
        return [[a, b, float(self.values[i, j])] for i, a in enumerate(self.layers)
                for j, b in enumerate(self.layers)]


def cka_matrix(model, images, batch_size: int = 64, paths=None) -> CKAMatrix:
    """Pairwise mini-batch CKA between block outputs (flattened per sample)."""
    n = len(images)
    if n // batch_size < 2:
        raise ValueError("mini-batch CKA needs at least two full batches")
    paths = list(paths) if paths is not None else model.block_paths()
    L = len(paths)
    hs = np.zeros((L, L))
    for start in range(0, (n // batch_size) * batch_size, batch_size):
        acts = model.activations(images[start:start + batch_size], paths, batch_size=batch_size)
        grams = [a.reshape(batch_size, -1) @ a.reshape(batch_size, -1).T for a in acts.values()]
        for i in range(L):
            for j in range(i, L):
                hs[i, j] += unbiased_hsic(grams[i], grams[j])
    vals = np.eye(L)
    flagged = []
    for i in range(L):
        for j in range(i + 1, L):
            den = hs[i, i] * hs[j, j]
            if den <= 0:
                vals[i, j] = vals[j, i] = math.nan
                flagged.append((paths[i], paths[j]))
            else:
                vals[i, j] = vals[j, i] = min(max(hs[i, j] / math.sqrt(den), 0.0), 1.0)
    for i in range(L):
        if hs[i, i] <= 0:
            vals[i, i] = math.nan
            flagged.append((paths[i], paths[i]))
    return CKAMatrix(paths, vals, flagged)


def block_structure_gap(cka: CKAMatrix, stage_of) -> tuple:
    """(mean within-stage CKA, mean cross-stage CKA) over off-diagonal cells."""
    within, cross = [], []
    for i, a in enumerate(cka.layers):
        for j, b in enumerate(cka.layers):
            if j <= i or not math.isfinite(cka.values[i, j]):
                continue
            (within if stage_of(a) == stage_of(b) else cross).append(cka.values[i, j])
    return (float(np.mean(within)) if within else math.nan,
            float(np.mean(cross)) if cross else math.nan)


# ---------------------------------------------------------------------------
# lesions
# ---------------------------------------------------------------------------
def lesion_sweep(model, images, labels, units=None, batch_size: int = 256) -> list:
    """(unit, clean accuracy - accuracy with that residual branch zeroed)."""
    units = list(units) if units is not None else model.residual_units()
    clean = accuracy(model, images, labels, batch_size)
    out = []
    for u in units:
        preds = model.predict(images, batch_size, ablate=(u,)).argmax(axis=1)
        out.append((u, clean - float(np.mean(preds == labels))))
    return out


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------
@dataclass
class Reliability:
    conf: np.ndarray
    acc: np.ndarray
    count: np.ndarray
    ece: float

    def rows(self) -> list:
        return [[b, float(c), float(a), int(n)] for b, (c, a, n) in
                enumerate(zip(self.conf, self.acc, self.count))]


def calibration(confidences, correct, bins: int = 15) -> Reliability:
    """Uniform bins (lo, hi] on [0, 1]; ECE = sum (n_b / N) |acc_b - conf_b|."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    count = np.bincount(idx, minlength=bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.bincount(idx, weights=conf, minlength=bins) / count
        a = np.bincount(idx, weights=hit, minlength=bins) / count
    n = max(len(conf), 1)
    ece = float(np.sum(np.where(count > 0, count / n * np.abs(np.nan_to_num(a - c)), 0.0)))
    return Reliability(c, a, count, ece)


def softmax_np(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def reliability_from_logits(logits, labels, bins: int = 15) -> Reliability:
    p = softmax_np(logits)
    return calibration(p.max(axis=1), p.argmax(axis=1) == np.asarray(labels), bins)


def reliability_diagram(model, images, labels, bins: int = 15, batch_size: int = 256) -> Reliability:
    return reliability_from_logits(model.predict(images, batch_size), labels, bins)
