"""Learning-rate schedule and AdamW update."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..autodiff.tape import ParamVector


@dataclass
class TrainConfig:
    lr_max: float = 1.25e-4
    weight_decay: float = 5e-2
    epochs: int = 50
    warmup_epochs: int = 5
    batch_size: int = 96
    seed: int = 0
    label_smoothing: float = 0.0
    dataset: str = "synthetic:shapes"
    checkpoint_epochs: tuple = ()
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.checkpoint_epochs = tuple(int(e) for e in self.checkpoint_epochs)
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self):
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.epochs and self.warmup_epochs >= self.epochs:
            raise ValueError(f"warmup_epochs={self.warmup_epochs} must be < epochs={self.epochs}")
        if min(self.lr_max, self.weight_decay, self.eps) < 0:
            raise ValueError("rates must be nonnegative")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ValueError("label_smoothing must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        return self

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def lr_at(config: TrainConfig, step: int, steps_per_epoch: int = 1) -> float:
    """Linear warmup from 0, then cosine decay reaching 0 at the last step."""
    total = config.epochs * steps_per_epoch
    warm = config.warmup_epochs * steps_per_epoch
    if not 0 <= step < max(total, 1):
        raise ValueError(f"step {step} outside run of {total} steps")
    if step < warm:
        return config.lr_max * step / warm
    span = total - 1 - warm
    t = (step - warm) / span if span > 0 else 1.0
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * t))


@dataclass
class AdamState:
    m: ParamVector
    v: ParamVector
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamVector) -> AdamState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adamw_step(params: ParamVector, grads: ParamVector, state: AdamState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0,
               decay=None) -> tuple:
    """One decoupled-decay Adam step; returns (new params, new state).

    ``decay`` restricts weight decay to the named parameters (all when None).
    """
    if grads.names() != params.names():
        raise ValueError("gradient layout does not match parameters")
    b1, b2 = betas
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_p, new_m, new_v = [], [], []
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        upd = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay and (decay is None or name in decay):
            upd = upd + weight_decay * p
        new_p.append((name, p - lr * upd))
        new_m.append((name, m))
        new_v.append((name, v))
    return ParamVector(new_p), AdamState(ParamVector(new_m), ParamVector(new_v), t)
