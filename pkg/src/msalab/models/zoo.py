"""Preset architectures and the AlterNet build-up rule."""
from __future__ import annotations

from dataclasses import replace

from ..nn.functional import GLOBAL, Window
from .spec import CONV_KINDS, BlockSpec, HeadSpec, ModelSpec, SpecError, Stage

PAPER_HEADS = (3, 6, 12, 24)
DESK_HEADS = (1, 2, 4, 8)
DESK_WIDTHS = (8, 16, 32, 64)
ALTERNET_WINDOW = Window("partition", 4)


def pad_last_stage(spec: ModelSpec) -> ModelSpec:
    """Append one block to the last stage when it has an odd block count."""
    if not spec.stages:
        return spec
    last = spec.stages[-1]
    if len(last.blocks) % 2 == 0:
        return spec
    stages = list(spec.stages)
    stages[-1] = Stage(last.blocks + (last.blocks[-1],), last.subsample)
    return spec.with_stages(stages)


def _alternate_slots(n_blocks: int) -> list:
    return list(range(n_blocks - 1, -1, -2))


def buildup_positions(baseline: ModelSpec, n_msa: int) -> list:
    """(stage, block index) pairs, 1-based stage, in replacement order.

    Ends of the later stages come first (last stage back to stage 2); each
    further round takes the next alternate slot (end-2, end-4, ...) of those
    stages; stage 1 is only used once every later slot is taken.
    """
    slots = {s: _alternate_slots(len(st.blocks)) for s, st in enumerate(baseline.stages, start=1)}
    order = []
    later = [s for s in sorted(slots, reverse=True) if s > 1]
    for r in range(max((len(v) for v in slots.values()), default=0)):
        for s in later:
            if r < len(slots[s]):
                order.append((s, slots[s][r]))
    order.extend((1, i) for i in slots.get(1, []))
    if n_msa < 0 or n_msa > len(order):
        raise SpecError("buildup", f"n_msa={n_msa} exceeds {len(order)} replaceable positions")
    return order[:n_msa]


def apply_buildup_rule(baseline: ModelSpec, n_msa: int, heads_schedule=PAPER_HEADS,
                       window: Window = ALTERNET_WINDOW) -> ModelSpec:
    """Replace Conv blocks with MSA blocks alternately from the end of each stage."""
    heads_schedule = tuple(heads_schedule)
    if len(heads_schedule) < len(baseline.stages):
        raise SpecError("buildup", "heads schedule shorter than the number of stages")
    positions = buildup_positions(baseline, n_msa)
    if not positions:
        return baseline
    stages = [list(st.blocks) for st in baseline.stages]
    for s, i in positions:
        old = stages[s - 1][i]
        if old.kind not in CONV_KINDS:
            raise SpecError(f"s{s}.b{i}", f"cannot replace {old.kind} block")
        stages[s - 1][i] = BlockSpec("MSA", old.width, heads=heads_schedule[s - 1], window=window)
    new = replace(
        baseline,
        stages=tuple(Stage(tuple(b), st.subsample) for b, st in zip(stages, baseline.stages)),
        heads_schedule=heads_schedule[:len(baseline.stages)],
    )
    return new.validate()


def msa_positions(spec: ModelSpec) -> list:
    return [(s, i) for s, st in enumerate(spec.stages, start=1)
            for i, b in enumerate(st.blocks) if b.kind == "MSA"]


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------
def tiny_resnet(depths=(2, 2, 2, 2), widths=DESK_WIDTHS, block: str = "basic",
                expansion: int = 4, classes: int = 10, image_size: int = 16,
                in_channels: int = 3) -> ModelSpec:
    kind = "ConvBasic" if block == "basic" else "ConvBottleneck"
    exp = float(expansion) if kind == "ConvBottleneck" else None
    stages = []
    for s, (d, w) in enumerate(zip(depths, widths)):
        sub = BlockSpec("Subsample", w) if s else None
        stages.append(Stage(tuple(BlockSpec(kind, w, expansion=exp) for _ in range(d)), sub))
    return ModelSpec(BlockSpec("ConvStem", widths[0], size=3), tuple(stages),
                     HeadSpec("gap", classes), image_size, in_channels, name="tiny_resnet").validate()


def _transformer_blocks(depth, width, heads, window, mlp_ratio):
    blocks = []
    for _ in range(depth):
        blocks.append(BlockSpec("MSA", width, heads=heads, window=window))
        blocks.append(BlockSpec("MLP", width, expansion=float(mlp_ratio)))
    return tuple(blocks)


def tiny_vit(depth: int = 4, dim: int = 32, heads: int = 2, patch: int = 2,
             mlp_ratio: float = 2.0, head: str = "cls", window: Window = GLOBAL,
             classes: int = 10, image_size: int = 16, in_channels: int = 3) -> ModelSpec:
    stem = BlockSpec("PatchEmbed", dim, size=patch, cls_token=(head == "cls"), pos_embed=True)
    stage = Stage(_transformer_blocks(depth, dim, heads, window, mlp_ratio))
    return ModelSpec(stem, (stage,), HeadSpec(head, classes), image_size, in_channels,
                     name="tiny_vit").validate()


def tiny_pit(depths=(1, 1, 1), widths=(16, 32, 64), heads=(1, 2, 4), patch: int = 2,
             mlp_ratio: float = 2.0, window: Window = GLOBAL, classes: int = 10,
             image_size: int = 16, in_channels: int = 3, name: str = "tiny_pit") -> ModelSpec:
    stem = BlockSpec("PatchEmbed", widths[0], size=patch, pos_embed=not window.is_local)
    stages = []
    for s, (d, w, h) in enumerate(zip(depths, widths, heads)):
        sub = BlockSpec("Subsample", w) if s else None
        stages.append(Stage(_transformer_blocks(d, w, h, window, mlp_ratio), sub))
    return ModelSpec(stem, tuple(stages), HeadSpec("gap", classes), image_size, in_channels,
                     heads_schedule=tuple(heads), name=name).validate()


def tiny_swin(depths=(1, 1, 1), widths=(16, 32, 64), heads=(1, 2, 4), patch: int = 1,
              window: int = 4, **kw) -> ModelSpec:
    return tiny_pit(depths, widths, heads, patch=patch, window=Window("partition", window),
                    name="tiny_swin", **kw)


def alternet(n_msa: int = 4, heads_schedule=DESK_HEADS, window: int = 4, **resnet_knobs) -> ModelSpec:
    base = pad_last_stage(tiny_resnet(**resnet_knobs))
    spec = apply_buildup_rule(base, n_msa, heads_schedule, Window("partition", window))
    return replace(spec, name="alternet")


PRESETS = {
    "tiny_resnet": tiny_resnet,
    "tiny_vit": tiny_vit,
    "tiny_pit": tiny_pit,
    "tiny_swin": tiny_swin,
    "alternet": alternet,
}


def make_preset(name: str, **knobs) -> ModelSpec:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    for k, v in knobs.items():
        if k == "n_msa":
            continue
        if isinstance(v, (int, float)) and not isinstance(v, bool) and v <= 0:
            raise ValueError(f"knob {k} must be positive, got {v}")
    return PRESETS[name](**knobs)
