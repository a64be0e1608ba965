import numpy as np
import pytest

from msalab.autodiff import Tensor
from msalab.models import (BlockSpec, HeadSpec, ModelSpec, SpecError, Stage, alternet, apply_buildup_rule,
                           build_model, buildup_positions, make_preset, msa_positions, pad_last_stage,
                           tiny_pit, tiny_resnet, tiny_swin, tiny_vit)
from msalab.models.zoo import PAPER_HEADS
from msalab.nn import Window


def images(rng, n=2, c=3, s=16):
    return rng.standard_normal((n, c, s, s))


def paper_resnet():
    return tiny_resnet(depths=(3, 4, 6, 4), widths=(24, 48, 48, 48), image_size=16)


def test_zero_stage_gap_logits_are_linear_map_of_stem_mean(rng):
    spec = ModelSpec(BlockSpec("ConvStem", 4, size=3), (), HeadSpec("gap", 3), 8, 2)
    m = build_model(spec, 0)
    x = images(rng, 2, 2, 8)
    logits, acts = m.forward(x, capture=True)
    stem = acts["stem"].x.data
    ref = stem.mean(axis=(2, 3)) @ m.params["head.fc.w"] + m.params["head.fc.b"]
    np.testing.assert_allclose(logits.data, ref, atol=1e-14)


def test_resnet_output_shape(rng):
    m = build_model(tiny_resnet(), 0)
    assert m.forward(images(rng, 3)).shape == (3, 10)


def test_build_is_deterministic(rng):
    x = images(rng)
    for spec in (tiny_resnet(), tiny_vit(), tiny_swin(image_size=16)):
        a, b = build_model(spec, 7), build_model(spec, 7)
        assert a.params.equal(b.params)
        np.testing.assert_array_equal(a.predict(x), b.predict(x))
    assert not build_model(tiny_vit(), 1).params.equal(build_model(tiny_vit(), 2).params)


@pytest.mark.parametrize("name", ["tiny_resnet", "tiny_vit", "tiny_pit", "tiny_swin", "alternet"])
def test_presets_forward_and_paths(name, rng):
    m = build_model(make_preset(name), 0)
    logits, acts = m.forward(images(rng), capture=True, train=True)
    assert logits.shape == (2, 10) and np.all(np.isfinite(logits.data))
    assert list(acts) == m.block_paths() == m.spec.block_paths()
    maps = m.activations(images(rng), ["stem", m.block_paths()[-1]])
    assert all(v.ndim == 4 and v.shape[0] == 2 for v in maps.values())


def test_unknown_preset_and_bad_knob():
    with pytest.raises(ValueError):
        make_preset("resnet152")
    with pytest.raises(ValueError):
        make_preset("tiny_vit", depth=0)


def test_invariant_violations_name_the_block():
    stem = BlockSpec("ConvStem", 8, size=3)
    bad = ModelSpec(stem, (Stage((BlockSpec("ConvBasic", 16),)),))
    with pytest.raises(SpecError) as err:
        bad.validate()
    assert err.value.path == "s1.b0"
    with pytest.raises(SpecError, match="s1.b0"):
        ModelSpec(stem, (Stage((BlockSpec("MSA", 8, heads=3, window=Window()),)),)).validate()
    with pytest.raises(SpecError):
        BlockSpec("MLP", 8).validate()
    with pytest.raises(SpecError):
        BlockSpec("ConvBasic", 8, heads=2).validate()


def test_model_path_lookup_and_input_check(rng):
    m = build_model(tiny_resnet(), 0)
    assert m.path(2, 1) == "s2.b1" and m.stage_of("s2.b1") == 2
    with pytest.raises(KeyError):
        m.path(9, 0)
    with pytest.raises(ValueError):
        m.forward(images(rng, 1, 3, 8))
    with pytest.raises(SpecError):
        m.forward(images(rng), ablate=["s2.sub"])


def test_vit_block_sequence_and_cls_head(rng):
    spec = tiny_vit(depth=2)
    assert [b.kind for b in spec.stages[0].blocks] == ["MSA", "MLP", "MSA", "MLP"]
    m = build_model(tiny_vit(depth=1, head="cls"), 0)
    assert m.forward(images(rng)).shape == (2, 10)
    with pytest.raises(SpecError):
        tiny_vit(head="cls", window=Window("conv", 3))


def test_swin_window_on_32x32():
    spec = tiny_swin(image_size=32, patch=1, window=4)
    assert spec.grids()["s1.b0"] == (32, 32)
    assert spec.stages[0].blocks[0].window == Window("partition", 4)


def test_buildup_zero_is_identity():
    base = pad_last_stage(paper_resnet())
    assert apply_buildup_rule(base, 0) == base


def test_buildup_one_msa_replaces_final_block():
    base = pad_last_stage(paper_resnet())
    spec = apply_buildup_rule(base, 1, PAPER_HEADS)
    assert msa_positions(spec) == [(4, 3)]
    assert spec.stages[3].blocks[3].heads == 24


def test_buildup_four_msas_end_every_later_stage():
    base = pad_last_stage(paper_resnet())
    spec = apply_buildup_rule(base, 4, PAPER_HEADS)
    assert sorted(msa_positions(spec)) == [(2, 3), (3, 5), (4, 1), (4, 3)]
    assert [spec.stages[s].blocks[-1].kind for s in range(4)] == ["ConvBasic", "MSA", "MSA", "MSA"]
    assert [spec.stages[s].blocks[-1].heads for s in (1, 2, 3)] == [6, 12, 24]


def test_buildup_ordering_and_structure_preserved():
    base = pad_last_stage(paper_resnet())
    order = buildup_positions(base, 7)
    assert order == buildup_positions(base, 7) and order[:4] == [(4, 3), (3, 5), (2, 3), (4, 1)]
    assert all(s > 1 for s, _ in order)
    assert buildup_positions(base, 9)[7:] == [(1, 2), (1, 0)]
    with pytest.raises(SpecError):
        buildup_positions(base, 100)
    for n in range(3, 8):
        spec = apply_buildup_rule(base, n, PAPER_HEADS)
        assert spec.depths() == base.depths()
        assert [st.subsample for st in spec.stages] == [st.subsample for st in base.stages]
        assert [b.width for st in spec.stages for b in st.blocks] == \
               [b.width for st in base.stages for b in st.blocks]
        assert all(spec.stages[s].blocks[-1].kind == "MSA" for s in (1, 2, 3))
        assert set(msa_positions(spec)) == set(buildup_positions(base, n))


def test_pad_last_stage_makes_even():
    assert pad_last_stage(tiny_resnet(depths=(3, 4, 6, 3))).depths() == [3, 4, 6, 4]
    assert pad_last_stage(paper_resnet()).depths() == [3, 4, 6, 4]


def test_alternet_is_composition_of_buildup_rule():
    a = alternet(4, heads_schedule=PAPER_HEADS, depths=(3, 4, 6, 3), widths=(24, 48, 48, 48))
    b = apply_buildup_rule(pad_last_stage(tiny_resnet(depths=(3, 4, 6, 3), widths=(24, 48, 48, 48))), 4,
                           PAPER_HEADS)
    assert a.stages == b.stages and a.heads_schedule == b.heads_schedule


def test_alternet_zero_msas_is_padded_resnet(rng):
    a, b = alternet(0), pad_last_stage(tiny_resnet())
    assert a.stages == b.stages
    x = images(rng)
    np.testing.assert_array_equal(build_model(a, 3).predict(x), build_model(b, 3).predict(x))


@pytest.mark.parametrize("spec", [tiny_resnet(), tiny_vit(), alternet(4), tiny_pit(),
                                  tiny_resnet(block="bottleneck", widths=(8, 16, 32, 64))],
                         ids=lambda s: s.name)
def test_spec_text_roundtrip(spec):
    assert ModelSpec.from_text(spec.to_text()) == spec


def test_weight_decay_set_and_filter_axes():
    m = build_model(tiny_vit(depth=1), 0)
    assert "head.fc.w" in m.decay and "head.fc.b" not in m.decay
    assert not any(k.endswith((".b", ".beta", ".g", "pos", "cls")) for k in m.decay)
    r = build_model(tiny_resnet(), 0)
    conv = [k for k in r.decay if r.params[k].ndim == 4]
    assert conv and all(r.filter_axes[k] == 0 for k in conv)


def test_ablating_residual_unit_changes_logits(rng):
    m = build_model(tiny_resnet(), 0)
    x = images(rng)
    full = m.predict(x)
    drop = m.predict(x, ablate=["s1.b0"])
    assert drop.shape == full.shape and not np.array_equal(full, drop)


def test_param_dict_override(rng):
    m = build_model(tiny_vit(depth=1), 0)
    x = images(rng)
    P = {"head.fc.b": Tensor(np.full(10, 5.0))}
    np.testing.assert_allclose(m.forward(x, P).data - m.forward(x).data, 5.0, atol=1e-12)
