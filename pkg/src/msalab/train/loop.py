"""Minibatch training loop with resumable checkpoints."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..autodiff import no_grad, value_and_grad
from ..io.report import write_csv
from ..models.model import Model, build_model
from ..models.spec import ModelSpec
from .checkpoint import Checkpoint
from .losses import nll
from .optim import AdamState, TrainConfig, adamw_step, lr_at

log = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "lr", "train_nll", "test_err")


class IncompatibleData(ValueError):
    pass


@dataclass
class TrainResult:
    model: Model
    checkpoints: dict = field(default_factory=dict)  # epoch -> Checkpoint
    metrics: list = field(default_factory=list)

    def at(self, tag: str) -> Checkpoint:
        for ck in self.checkpoints.values():
            if tag in ck.tag.split("+"):
                return ck
        raise KeyError(tag)

    @property
    def final(self) -> Checkpoint:
        return self.checkpoints[max(self.checkpoints)]


def check_compatible(spec: ModelSpec, data) -> None:
    want = (spec.in_channels, spec.image_size, spec.image_size)
    if data.class_count != spec.head.classes:
        raise IncompatibleData(f"dataset has {data.class_count} classes, model head has {spec.head.classes}")
    if len(data) and tuple(data.shape) != want:
        raise IncompatibleData(f"dataset images {tuple(data.shape)} do not match model input {want}")


def evaluate(model: Model, data, batch_size: int = 256) -> tuple:
    """(mean NLL, error rate) in eval mode; NaNs for an empty set."""
    if data is None or len(data) == 0:
        return float("nan"), float("nan")
    total, wrong = 0.0, 0
    with no_grad():
        for i in range(0, len(data), batch_size):
            x, y = data.images[i:i + batch_size], data.labels[i:i + batch_size]
            logits = model.forward(x, train=False)
            total += nll(logits, y).item() * len(y)
            wrong += int(np.sum(logits.data.argmax(axis=1) != y))
    return total / len(data), wrong / len(data)


def _schedule(config: TrainConfig, n: int) -> tuple:
    bs = min(config.batch_size, n) if n else config.batch_size
    spe = n // bs if n else 0
    return bs, spe


def _tags(epoch: int, config: TrainConfig) -> list:
    tags = []
    if epoch == 0:
        tags.append("init")
    if config.warmup_epochs and epoch == config.warmup_epochs:
        tags.append("warmup")
    if epoch in config.checkpoint_epochs:
        tags.append(f"e{epoch}")
    if epoch == config.epochs:
        tags.append("final")
    return tags


def _snapshot(model, opt, epoch, rng, metrics, config, tags) -> Checkpoint:
    params, buffers = model.state()
    return Checkpoint(params, buffers, copy.deepcopy(opt), epoch, rng.bit_generator.state,
                      [dict(r) for r in metrics], model.spec.to_dict(), config.to_dict(),
                      "+".join(tags))


def train(spec: ModelSpec, config: TrainConfig, data, test=None, out_dir=None,
          resume: Checkpoint | None = None, stop_epoch: int | None = None) -> TrainResult:
    """Train ``spec`` on ``data``.

    Checkpoints are taken at initialization, at the end of warmup, at each
    ``config.checkpoint_epochs`` mark and at the end.  ``stop_epoch`` ends the
    run early (for split runs that are later resumed).
    """
    config.validate()
    check_compatible(spec, data)
    if test is not None:
        check_compatible(spec, test)
    model = build_model(spec, config.seed)
    n = len(data)
    bs, spe = _schedule(config, n)
    if config.epochs and spe == 0:
        raise IncompatibleData("training set is empty")
    rng = np.random.default_rng([config.seed, 1])
    if resume is not None:
        resume.restore_model(model)
        opt = copy.deepcopy(resume.opt)
        rng.bit_generator.state = resume.rng_state
        metrics = [dict(r) for r in resume.metrics]
        start = resume.epoch
    else:
        opt = AdamState.zeros(model.params)
        tr_nll, _ = evaluate(model, data)
        _, te_err = evaluate(model, test)
        metrics = [{"epoch": 0, "lr": 0.0, "train_nll": tr_nll, "test_err": te_err}]
        start = 0
    result = TrainResult(model)
    if resume is None:
        result.checkpoints[0] = _snapshot(model, opt, 0, rng, metrics, config, _tags(0, config))
    end = config.epochs if stop_epoch is None else min(stop_epoch, config.epochs)
    decay = model.decay
    for epoch in range(start + 1, end + 1):
        perm = rng.permutation(n)
        lr = 0.0
        for b in range(spe):
            idx = np.sort(perm[b * bs:(b + 1) * bs])
            x, y = data.images[idx], data.labels[idx]
            lr = lr_at(config, opt.step, spe)

            def closure(P):
                return nll(model.forward(x, P, train=True), y, config.label_smoothing)

            _, grads = value_and_grad(closure, model.params)
            model.params, opt = adamw_step(model.params, grads, opt, lr, config.betas, config.eps,
                                           config.weight_decay, decay)
        tr_nll, _ = evaluate(model, data)
        _, te_err = evaluate(model, test)
        if not np.isfinite(tr_nll):
            raise FloatingPointError(f"training diverged at epoch {epoch}")
        metrics.append({"epoch": epoch, "lr": lr, "train_nll": tr_nll, "test_err": te_err})
        log.info("epoch %d lr %.3g nll %.4f err %.3f", epoch, lr, tr_nll, te_err)
        tags = _tags(epoch, config)
        if tags or epoch == end:
            result.checkpoints[epoch] = _snapshot(model, opt, epoch, rng, metrics, config,
                                                  tags or [f"e{epoch}"])
    result.metrics = metrics
    if out_dir is not None:
        save_run(result, out_dir)
    return result


def save_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    for epoch, ck in result.checkpoints.items():
        ck.save(out / f"ckpt_e{epoch:03d}.bin")
    write_metrics(result.metrics, out / "metrics.csv")


def write_metrics(metrics, path):
    return write_csv(path, LOG_HEADER, [[r[k] for k in LOG_HEADER] for r in metrics])


def load_model(ck: Checkpoint) -> Model:
    """Rebuild the model stored in a checkpoint."""
    if ck.spec is None:
        raise ValueError("checkpoint carries no model spec")
    model = build_model(ModelSpec.from_dict(ck.spec), 0)
    return ck.restore_model(model)
