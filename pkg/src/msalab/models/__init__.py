"""Architecture specs, presets and executable models."""
from .model import Features, Model, build_model
from .spec import BlockSpec, HeadSpec, ModelSpec, SpecError, Stage
from .zoo import (PRESETS, alternet, apply_buildup_rule, buildup_positions, make_preset,
                  msa_positions, pad_last_stage, tiny_pit, tiny_resnet, tiny_swin, tiny_vit)

__all__ = ["BlockSpec", "Features", "HeadSpec", "Model", "ModelSpec", "PRESETS", "SpecError",
           "Stage", "alternet", "apply_buildup_rule", "build_model", "buildup_positions",
           "make_preset", "msa_positions", "pad_last_stage", "tiny_pit", "tiny_resnet",
           "tiny_swin", "tiny_vit"]
