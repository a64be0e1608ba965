"""Run configuration: flat key/value text with dotted section names.

Example::

    [run]
    seed = 0
    out = runs/vit

    [model]
    preset = tiny_vit

    [model.knobs]
    depth = 4

    [train]
    epochs = 30

Any key can be overridden from the environment as
``MSALAB__<SECTION>__<KEY>``, with dots in section names written as ``__``
(``MSALAB__MODEL__KNOBS__DEPTH=6``).
"""
from __future__ import annotations

import ast
import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from ..train.optim import TrainConfig
from .data import CIFAR_MEAN, CIFAR_STD

ENV_PREFIX = "MSALAB__"
ANALYSES = ("spectra", "fourier", "variance", "cka", "lesion", "landscape", "robustness", "reliability")
ALIASES = {"nep": "spectra", "ape": "spectra", "spectrum": "spectra"}


class ConfigError(ValueError):
    pass


def parse_value(text: str):
    t = text.strip()
    low = t.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(t)
    except (ValueError, SyntaxError):
        pass
    if "," in t:
        return tuple(parse_value(p) for p in t.split(",") if p.strip())
    return t


def read_sections(path=None, text: str | None = None, environ=None) -> dict:
    """{section: {key: value}} from a file or string plus environment overrides."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    if text is not None:
        cp.read_string(text)
    elif path is not None:
        p = Path(path)
        try:
            cp.read_string(p.read_text(encoding="utf-8"), source=str(p))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
    out = {s: {k: parse_value(v) for k, v in cp.items(s)} for s in cp.sections()}
    env = os.environ if environ is None else environ
    for name, val in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        parts = name[len(ENV_PREFIX):].lower().split("__")
        if len(parts) < 2:
            continue
        out.setdefault(".".join(parts[:-1]), {})[parts[-1]] = parse_value(val)
    return out


@dataclass
class DataConfig:
    kind: str = "synthetic"  # synthetic | cifar10
    synthetic: str = "shapes"
    n_train: int = 1000
    n_test: int = 500
    extent: int = 16
    classes: int = 10
    train_path: str | None = None
    test_path: str | None = None
    mean: tuple = CIFAR_MEAN
    std: tuple = CIFAR_STD


@dataclass
class RunConfig:
    seed: int
    out: str = "runs/default"
    preset: str = "tiny_resnet"
    knobs: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    analyses: dict = field(default_factory=dict)  # name -> params
    selected: tuple = ()  # from [analysis] only; empty means all

    def analysis(self, name: str) -> dict:
        return dict(self.analyses.get(name, {}))


def _pick(cls, d: dict, where: str):
    unknown = set(d) - set(cls.__dataclass_fields__)
    if unknown:
        raise ConfigError(f"[{where}] unknown keys {sorted(unknown)}")
    return cls(**d)


def load_config(path=None, text: str | None = None, environ=None) -> RunConfig:
    secs = read_sections(path, text, environ)
    run = secs.get("run", {})
    if run.get("seed") is None:
        raise ConfigError("[run] seed is mandatory")
    model = secs.get("model", {})
    train_d = dict(secs.get("train", {}))
    train_d.setdefault("seed", run["seed"])
    for key in ("checkpoint_epochs", "betas"):
        if key in train_d and not isinstance(train_d[key], (tuple, list)):
            train_d[key] = (train_d[key],)
    try:
        tc = TrainConfig.from_dict(train_d)
        unknown = set(train_d) - set(TrainConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"[train] unknown keys {sorted(unknown)}")
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[train] {exc}") from exc
    data = _pick(DataConfig, secs.get("data", {}), "data")
    if data.kind not in ("synthetic", "cifar10"):
        raise ConfigError(f"[data] unknown kind {data.kind!r}")
    analyses = {}
    only = secs.get("analysis", {}).get("only")
    names = only if isinstance(only, tuple) else ((only,) if only else ())
    selected = tuple(dict.fromkeys(ALIASES.get(n, n) for n in names))
    for sec, vals in secs.items():
        if sec.startswith("analysis."):
            name = ALIASES.get(sec.split(".", 1)[1], sec.split(".", 1)[1])
            if name not in ANALYSES:
                raise ConfigError(f"[{sec}] unknown analysis")
            analyses.setdefault(name, {}).update(vals)
    bad = [n for n in selected if n not in ANALYSES]
    if bad:
        raise ConfigError(f"unknown analyses {bad}")
    cfg = RunConfig(seed=int(run["seed"]), out=str(run.get("out", "runs/default")),
                    preset=str(model.get("preset", "tiny_resnet")),
                    knobs=dict(secs.get("model.knobs", {})), train=tc, data=data, analyses=analyses,
                    selected=selected)
    return cfg


def select_analyses(only) -> list:
    """Normalize a comma list (with aliases) into analysis names."""
    if not only:
        return list(ANALYSES)
    names = []
    for raw in str(only).split(","):
        n = ALIASES.get(raw.strip(), raw.strip())
        if n not in ANALYSES:
            raise ConfigError(f"unknown analysis {raw.strip()!r}; choose from {list(ANALYSES)} or nep/ape")
        if n not in names:
            names.append(n)
    return names
