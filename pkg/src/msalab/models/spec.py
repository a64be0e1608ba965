"""Declarative, stage-structured architecture descriptions."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from ..nn.functional import GLOBAL, Window

CONV_KINDS = ("ConvBasic", "ConvBottleneck")
BLOCK_KINDS = ("ConvBottleneck", "ConvBasic", "MSA", "MLP", "PatchEmbed", "Subsample",
               "BoxBlur", "ConvStem")
RESIDUAL_KINDS = ("ConvBottleneck", "ConvBasic", "MSA", "MLP")


class SpecError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class BlockSpec:
    kind: str
    width: int
    heads: int | None = None
    window: Window | None = None
    expansion: float | None = None
    size: int | None = None  # patch size, stem kernel or blur extent
    cls_token: bool = False
    pos_embed: bool = False

    def validate(self, path: str = "block"):
        if self.kind not in BLOCK_KINDS:
            raise SpecError(path, f"unknown block kind {self.kind!r}")
        if self.width < 1:
            raise SpecError(path, "width must be positive")
        is_msa = self.kind == "MSA"
        if is_msa != (self.heads is not None) or is_msa != (self.window is not None):
            raise SpecError(path, "heads/window must be set exactly for MSA blocks")
        if is_msa:
            if self.heads < 1 or self.width % self.heads:
                raise SpecError(path, f"{self.heads} heads do not divide width {self.width}")
        needs_exp = self.kind in ("MLP", "ConvBottleneck")
        if needs_exp != (self.expansion is not None):
            raise SpecError(path, "expansion must be set exactly for MLP/ConvBottleneck")
        if needs_exp and self.expansion <= 0:
            raise SpecError(path, "expansion must be positive")
        if self.kind == "ConvBottleneck" and self.width % int(self.expansion):
            raise SpecError(path, "bottleneck width must be divisible by expansion")
        if self.kind in ("PatchEmbed", "ConvStem", "BoxBlur") and (self.size or 0) < 1:
            raise SpecError(path, f"{self.kind} needs a positive size")
        if (self.cls_token or self.pos_embed) and self.kind != "PatchEmbed":
            raise SpecError(path, "cls_token/pos_embed only apply to PatchEmbed")

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "width": self.width}
        if self.heads is not None:
            d["heads"] = self.heads
        if self.window is not None:
            d["window"] = self.window.to_dict()
        if self.expansion is not None:
            d["expansion"] = self.expansion
        if self.size is not None:
            d["size"] = self.size
        if self.cls_token:
            d["cls_token"] = True
        if self.pos_embed:
            d["pos_embed"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> BlockSpec:
        d = dict(d)
        if "window" in d:
            d["window"] = Window.from_dict(d["window"])
        return cls(**d)


@dataclass(frozen=True)
class Stage:
    blocks: tuple = ()
    subsample: BlockSpec | None = None

    def to_dict(self) -> dict:
        return {"blocks": [b.to_dict() for b in self.blocks],
                "subsample": self.subsample.to_dict() if self.subsample else None}

    @classmethod
    def from_dict(cls, d: dict) -> Stage:
        sub = d.get("subsample")
        return cls(tuple(BlockSpec.from_dict(b) for b in d.get("blocks", [])),
                   BlockSpec.from_dict(sub) if sub else None)


@dataclass(frozen=True)
class HeadSpec:
    mode: str = "gap"
    classes: int = 10


@dataclass(frozen=True)
class ModelSpec:
    stem: BlockSpec
    stages: tuple = ()
    head: HeadSpec = field(default_factory=HeadSpec)
    image_size: int = 16
    in_channels: int = 3
    heads_schedule: tuple | None = None
    name: str = "custom"

    # -- structure ----------------------------------------------------------
    def block_paths(self) -> list:
        """Analysis-hook paths in execution order (stem, subsamples, blocks)."""
        paths = ["stem"]
        for s, stage in enumerate(self.stages, start=1):
            if stage.subsample is not None:
                paths.append(f"s{s}.sub")
            paths.extend(f"s{s}.b{i}" for i in range(len(stage.blocks)))
        return paths

    def block_at(self, path: str) -> BlockSpec:
        if path == "stem":
            return self.stem
        stage_s, part = path.split(".")
        stage = self.stages[int(stage_s[1:]) - 1]
        return stage.subsample if part == "sub" else stage.blocks[int(part[1:])]

    def depths(self) -> list:
        return [len(st.blocks) for st in self.stages]

    def grids(self) -> dict:
        """Spatial extent (h, w) of the features leaving each block path."""
        if self.stem.kind == "PatchEmbed":
            if self.image_size % self.stem.size:
                raise SpecError("stem", f"image {self.image_size} not divisible by patch {self.stem.size}")
            side = self.image_size // self.stem.size
        else:
            side = self.image_size
        out = {"stem": (side, side)}
        for s, stage in enumerate(self.stages, start=1):
            if stage.subsample is not None:
                if side % 2:
                    raise SpecError(f"s{s}.sub", f"cannot subsample odd extent {side}")
                side //= 2
                out[f"s{s}.sub"] = (side, side)
            for i in range(len(stage.blocks)):
                out[f"s{s}.b{i}"] = (side, side)
        return out

    def validate(self) -> ModelSpec:
        self.stem.validate("stem")
        if self.stem.kind not in ("PatchEmbed", "ConvStem"):
            raise SpecError("stem", "stem must be PatchEmbed or ConvStem")
        if self.head.mode not in ("gap", "cls"):
            raise SpecError("head", f"unknown head mode {self.head.mode!r}")
        if self.head.mode == "cls" and not self.stem.cls_token:
            raise SpecError("head", "CLS head requires a class token in the stem")
        if self.head.classes < 1:
            raise SpecError("head", "class count must be positive")
        grids = self.grids()
        width = self.stem.width
        for s, stage in enumerate(self.stages, start=1):
            if stage.subsample is not None:
                stage.subsample.validate(f"s{s}.sub")
                if stage.subsample.kind != "Subsample":
                    raise SpecError(f"s{s}.sub", "stage subsample must be a Subsample block")
                if self.stem.cls_token:
                    raise SpecError(f"s{s}.sub", "subsampling is not supported with a class token")
                width = stage.subsample.width
            for i, blk in enumerate(stage.blocks):
                path = f"s{s}.b{i}"
                blk.validate(path)
                if blk.kind in ("PatchEmbed", "ConvStem", "Subsample"):
                    raise SpecError(path, f"{blk.kind} cannot appear inside a stage")
                if blk.width != width:
                    raise SpecError(path, f"width {blk.width} != stage width {width}")
                if blk.kind == "MSA":
                    if self.heads_schedule is not None and blk.heads != self.heads_schedule[s - 1]:
                        raise SpecError(path, f"heads {blk.heads} != schedule {self.heads_schedule[s - 1]}")
                    if blk.window.is_local and self.stem.cls_token:
                        raise SpecError(path, "local attention cannot be combined with a class token")
                    if blk.window.mode == "conv" and blk.window.size % 2 == 0:
                        raise SpecError(path, "convolutional window needs odd size")
                    gh, gw = grids[path]
                    eff = effective_window(blk.window, gh, gw)
                    if eff.mode == "partition" and (gh % eff.size or gw % eff.size):
                        raise SpecError(path, f"grid {gh}x{gw} not divisible by window {eff.size}")
                if blk.kind in CONV_KINDS and self.stem.cls_token:
                    raise SpecError(path, "conv blocks cannot process a class token")
        return self

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "image_size": self.image_size,
            "in_channels": self.in_channels,
            "stem": self.stem.to_dict(),
            "stages": [st.to_dict() for st in self.stages],
            "head": {"mode": self.head.mode, "classes": self.head.classes},
            "heads_schedule": list(self.heads_schedule) if self.heads_schedule else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelSpec:
        hs = d.get("heads_schedule")
        return cls(
            stem=BlockSpec.from_dict(d["stem"]),
            stages=tuple(Stage.from_dict(s) for s in d.get("stages", [])),
            head=HeadSpec(**d.get("head", {})),
            image_size=int(d.get("image_size", 16)),
            in_channels=int(d.get("in_channels", 3)),
            heads_schedule=tuple(hs) if hs else None,
            name=d.get("name", "custom"),
        )

    def to_text(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_text(cls, text: str) -> ModelSpec:
        return cls.from_dict(json.loads(text))

    def with_stages(self, stages) -> ModelSpec:
        return replace(self, stages=tuple(stages))


def effective_window(window: Window, gh: int, gw: int) -> Window:
    """Partition windows shrink to the grid when the grid is smaller."""
    if window.mode == "partition" and window.size > min(gh, gw):
        return Window("partition", min(gh, gw))
    return window


__all__ = ["BlockSpec", "HeadSpec", "ModelSpec", "SpecError", "Stage", "GLOBAL",
           "Window", "effective_window", "BLOCK_KINDS", "CONV_KINDS", "RESIDUAL_KINDS"]
