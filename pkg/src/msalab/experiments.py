"""Shared desk-scale protocols for the trend experiments.

Every trend check trains presets under one :class:`Protocol` so that runs are
comparable across architectures; the helpers here reduce trained models to the
few numbers each trend statement is about.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .features import lesion_sweep, variance_profile
from .fourier import delta_changes, frequency_robustness_sweep, layerwise_fourier_report
from .hessian import NoPositiveEigenvalues, ape, nep, spectrum
from .io.data import gen_synthetic
from .io.report import emit_report
from .models import alternet, make_preset
from .train import TrainConfig, train


@dataclass(frozen=True)
class Protocol:
    kind: str = "shapes"
    n_train: int = 2000
    n_test: int = 500
    extent: int = 16
    epochs: int = 40
    warmup_epochs: int = 5
    lr_max: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 5e-2
    data_seed: int = 1

    def data(self) -> tuple:
        return _datasets(self.kind, self.n_train, self.n_test, self.extent, self.data_seed)

    def config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(lr_max=self.lr_max, weight_decay=self.weight_decay, epochs=self.epochs,
                           warmup_epochs=self.warmup_epochs, batch_size=self.batch_size, seed=seed,
                           dataset=f"synthetic:{self.kind}")

    def as_dict(self) -> dict:
        return asdict(self)


@lru_cache(maxsize=8)
def _datasets(kind, n_train, n_test, extent, seed):
    tr = gen_synthetic(kind, n_train, extent=extent, seed=seed)
    te = gen_synthetic(kind, n_test, extent=extent, seed=seed + 1, split="test")
    return tr, te


@dataclass(frozen=True)
class SpectrumProtocol:
    """Power-iteration settings for warmup-checkpoint curvature."""
    batch_size: int = 16
    batches: int = 3
    k: int = 5
    max_iters: int = 50
    tol: float = 1e-2
    seed: int = 0


def train_spec(spec, protocol: Protocol, seed: int = 0, stop_epoch=None):
    tr, te = protocol.data()
    return train(spec, protocol.config(seed), tr, te, stop_epoch=stop_epoch)


def train_preset(name: str, protocol: Protocol, seed: int = 0, stop_epoch=None, **knobs):
    spec = make_preset(name, image_size=protocol.extent, **knobs)
    return train_spec(spec, protocol, seed, stop_epoch)


# ---------------------------------------------------------------------------
# curvature at the end of warmup
# ---------------------------------------------------------------------------
def warmup_spectrum(name: str, protocol: Protocol, sp: SpectrumProtocol = SpectrumProtocol(),
                    seed: int = 0, **knobs) -> list:
    """Spectrum records of the regularized loss at the end-of-warmup checkpoint."""
    result = train_preset(name, protocol, seed, stop_epoch=protocol.warmup_epochs, **knobs)
    model = result.model
    tr, _ = protocol.data()
    frac = sp.batches * sp.batch_size / len(tr)
    return spectrum(model, tr, batch_size=sp.batch_size, k=sp.k, sample_fraction=frac,
                    weight_decay=protocol.weight_decay, seed=sp.seed + seed, max_iters=sp.max_iters,
                    tol=sp.tol, checkpoint="warmup")


def curvature_summary(records) -> dict:
    try:
        a = ape(records)
    except NoPositiveEigenvalues:
        a = math.nan
    return {"nep": nep(records), "ape": a}


def non_increasing(seq, slack: float = 0.05, allowed: int = 1) -> bool:
    """True when ``seq`` never rises, except ``allowed`` rises of at most ``slack`` relative."""
    rises = [(b - a) / abs(a) if a else math.inf for a, b in zip(seq, seq[1:]) if b > a]
    return len(rises) <= allowed and all(r <= slack for r in rises)


# ---------------------------------------------------------------------------
# trained-model reductions
# ---------------------------------------------------------------------------
def latter_half(model, paths) -> list:
    order = model.block_paths()
    body = [p for p in order if p != "stem"]
    cut = len(body) // 2
    return [p for p in paths if p in body[cut:]]


def block_trends(model, images) -> dict:
    """Per-kind signs of the Δ-log-amplitude and variance changes across blocks."""
    dchange = delta_changes(layerwise_fourier_report(model, images))
    vchange = variance_profile(model, images).changes()
    msa = [p for p in model.block_paths() if model.block_kind(p) == "MSA"]
    mlp = [p for p in model.block_paths() if model.block_kind(p) == "MLP"]
    late = latter_half(model, msa)
    return {
        "delta": dchange,
        "variance": vchange,
        "late_msa_lowpass": float(np.mean([dchange[p] < 0 for p in late])),
        "mlp_highpass": float(np.mean([dchange[p] > 0 for p in mlp])),
        "msa_var_reduce": float(np.mean([vchange[p] < 1 for p in msa])),
        "mlp_var_increase": float(np.mean([vchange[p] > 1 for p in mlp])),
    }


def stage_lesion_drops(model, images, labels) -> tuple:
    """(mean drop of stage-initial units, mean drop of stage-final units)."""
    drops = dict(lesion_sweep(model, images, labels))
    stages = {}
    for unit in drops:
        s, b = unit.split(".")
        stages.setdefault(s, []).append((int(b[1:]), unit))
    first, last = [], []
    for units in stages.values():
        if len(units) < 2:
            continue
        units.sort()
        first.append(drops[units[0][1]])
        last.append(drops[units[-1][1]])
    return float(np.mean(first)), float(np.mean(last))


def band_drop_gap(model, images, labels, magnitude: float, seed: int = 0) -> dict:
    """Accuracy drop under noise in the top band minus the bottom band."""
    sweep = frequency_robustness_sweep(model, images, labels, magnitude, seed=seed)
    return {"sweep": sweep, "bottom": sweep[0][1], "top": sweep[-1][1],
            "gap": sweep[-1][1] - sweep[0][1]}


def alternet_curve(protocol: Protocol, n_values=range(5), seed: int = 0) -> list:
    """(n_msa, final test accuracy, TrainResult) for each AlterNet variant."""
    out = []
    for n in n_values:
        spec = alternet(n, image_size=protocol.extent)
        res = train_spec(spec, protocol, seed)
        out.append((n, 1.0 - res.metrics[-1]["test_err"], res))
    return out


def write_alternet_report(curve, out_dir) -> list:
    """alternet.csv and alternet.svg: final test accuracy against n_msa."""
    out = Path(out_dir)
    rows = [(n, acc) for n, acc, _ in curve]
    paths = [emit_report(rows, "csv", out / "alternet.csv", header=("n_msa", "test_acc"))]
    series = {"alternet": ([n for n, _ in rows], [a for _, a in rows])}
    paths.append(emit_report(series, "svg", out / "alternet.svg", title="AlterNet accuracy",
                             xlabel="number of MSA blocks", ylabel="test accuracy"))
    return paths
