"""Classification losses with optional l2 regularization."""
from __future__ import annotations

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor


def nll(logits: Tensor, labels, label_smoothing: float = 0.0) -> Tensor:
    """Mean cross-entropy; smoothing mixes in the uniform-target term."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("empty batch")
    classes = logits.shape[-1]
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes})")
    logp = ops.log_softmax(logits, axis=-1)
    picked = ops.getitem(logp, (np.arange(len(labels)), labels))
    loss = -ops.mean(picked)
    if label_smoothing:
        loss = loss * (1.0 - label_smoothing) - ops.mean(logp) * label_smoothing
    return loss


def l2_penalty(params: dict, names) -> Tensor:
    total = None
    for n in names:
        term = ops.sum(params[n] * params[n])
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def regularized_nll(model, images, labels, weight_decay: float, params=None,
                    label_smoothing: float = 0.0, train: bool = False) -> Tensor:
    """NLL + (weight_decay / 2) * ||theta||^2 over decay-eligible weights.

    Normalization affine parameters, biases and embeddings are excluded.
    """
    P = model._params(params)
    logits = model.forward(images, P, train=train, update_stats=False)
    loss = nll(logits, labels, label_smoothing)
    if weight_decay:
        loss = loss + l2_penalty(P, sorted(model.decay)) * (weight_decay / 2.0)
    return loss


def loss_closure(model, images, labels, weight_decay: float, label_smoothing: float = 0.0):
    """Closure params -> regularized loss, with normalization in eval mode."""
    def closure(P):
        return regularized_nll(model, images, labels, weight_decay, P, label_smoothing)
    return closure
