import math

import numpy as np
import pytest

from msalab import features as ft
from msalab.autodiff import Tensor
from msalab.models import BlockSpec, HeadSpec, ModelSpec, Stage, build_model, tiny_resnet
from msalab.nn import GLOBAL, msa_forward
from msalab.nn.functional import AttentionParams
from msalab.oracles import naive_hsic_cka


def identity_stem_model(stages=(), extent=8, channels=3, classes=2):
    spec = ModelSpec(BlockSpec("ConvStem", channels, size=1), tuple(stages), HeadSpec("gap", classes),
                     extent, channels)
    m = build_model(spec, 0)
    m.params["stem.conv.w"] = np.eye(channels).reshape(channels, channels, 1, 1)
    return m


# ---------------------------------------------------------------------------
# variance
# ---------------------------------------------------------------------------
def test_constant_maps_have_zero_variance():
    m = identity_stem_model()
    prof = ft.variance_profile(m, np.full((3, 3, 8, 8), 1.7))
    assert prof.layers == ["input", "stem"] and max(prof.variances) < 1e-30


def test_box_blur_block_quarters_noise_variance():
    m = identity_stem_model([Stage((BlockSpec("BoxBlur", 3, size=2),))], extent=64)
    ratios = []
    for seed in range(8):
        x = np.random.default_rng(seed).standard_normal((2, 3, 64, 64))
        prof = ft.variance_profile(m, x)
        ratios.append(prof.variances[-1] / prof.variances[0])
    assert abs(np.mean(ratios) / 0.25 - 1) <= 0.1
    assert set(prof.changes()) == {"stem", "s1.b0"}


def test_zero_logit_global_attention_collapses_variance(rng):
    z, eye = Tensor(np.zeros((4, 4))), Tensor(np.eye(4))
    out = msa_forward(rng.standard_normal((16, 4)), AttentionParams(z, z, eye, eye, 1, 4, GLOBAL),
                      grid=(4, 4)).data
    assert ft.map_variance(out.T.reshape(4, 4, 4)) < 1e-30


def test_variance_is_permutation_invariant(rng):
    x = rng.standard_normal((2, 3, 8, 8))
    perm = rng.permutation(64)
    y = x.reshape(2, 3, 64)[..., perm].reshape(x.shape)
    assert ft.map_variance(x) == pytest.approx(ft.map_variance(y), rel=1e-14)
    assert ft.map_variance(x) >= 0


# ---------------------------------------------------------------------------
# CKA
# ---------------------------------------------------------------------------
def test_cka_identity_and_invariances(rng):
    X = rng.standard_normal((20, 6))
    assert ft.linear_cka(X, X) == pytest.approx(1.0, abs=1e-12)
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    assert abs(ft.linear_cka(X, 3.7 * X @ Q) - 1) <= 1e-9


def test_cka_matches_naive_hsic_and_is_symmetric(rng):
    X, Y = rng.standard_normal((32, 10)), rng.standard_normal((32, 7))
    assert abs(ft.linear_cka(X, Y) - naive_hsic_cka(X, Y)) <= 1e-9
    assert abs(ft.linear_cka(X, Y) - ft.linear_cka(Y, X)) <= 1e-9
    assert 0 <= ft.linear_cka(X, Y) <= 1


def test_cka_rejects_constant_representation(rng):
    with pytest.raises(ft.UndefinedSimilarity):
        ft.linear_cka(np.ones((5, 3)), rng.standard_normal((5, 3)))
    with pytest.raises(ValueError):
        ft.linear_cka(rng.standard_normal((1, 3)), rng.standard_normal((1, 3)))


def test_unbiased_hsic_matches_direct_formula(rng):
    X, Y = rng.standard_normal((9, 3)), rng.standard_normal((9, 4))
    K, L = X @ X.T, Y @ Y.T
    n = 9
    Kt, Lt = K - np.diag(np.diag(K)), L - np.diag(np.diag(L))
    ref = (np.trace(Kt @ Lt) + Kt.sum() * Lt.sum() / ((n - 1) * (n - 2))
           - 2 / (n - 2) * np.ones(n) @ Kt @ Lt @ np.ones(n)) / (n * (n - 3))
    assert ft.unbiased_hsic(K, L) == pytest.approx(ref, rel=1e-12)
    assert ft.minibatch_cka([X, X], [X, X]) == pytest.approx(1.0, abs=1e-12)


def test_cka_matrix_single_layer_and_identical_blocks(rng):
    x = rng.standard_normal((32, 3, 8, 8))
    m = identity_stem_model()
    single = ft.cka_matrix(m, x, batch_size=16)
    assert single.values.tolist() == [[1.0]] and single.flagged == []
    m = identity_stem_model([Stage((BlockSpec("MLP", 3, expansion=2.0),))])
    m.params["s1.b0.fc2.w"] = np.zeros_like(m.params["s1.b0.fc2.w"])
    m.params["s1.b0.fc2.b"] = np.zeros_like(m.params["s1.b0.fc2.b"])
    mat = ft.cka_matrix(m, x, batch_size=16)
    assert abs(mat.values[0, 1] - 1) <= 1e-9
    np.testing.assert_allclose(mat.values, mat.values.T, atol=1e-9)
    assert len(mat.rows()) == 4 and "unbiased" in mat.estimator
    with pytest.raises(ValueError):
        ft.cka_matrix(m, x[:20], batch_size=16)


def test_cka_matrix_flags_constant_layer(rng):
    m = identity_stem_model()
    m.params["stem.conv.w"] = np.zeros_like(m.params["stem.conv.w"])
    mat = ft.cka_matrix(m, rng.standard_normal((8, 3, 8, 8)), batch_size=4)
    assert mat.flagged and math.isnan(mat.values[0, 0])


def test_block_structure_gap():
    mat = ft.CKAMatrix(["s1.b0", "s1.b1", "s2.b0"], np.array([[1, .9, .2], [.9, 1, .4], [.2, .4, 1.]]))
    within, cross = ft.block_structure_gap(mat, lambda p: int(p[1]))
    assert within == pytest.approx(0.9) and cross == pytest.approx(0.3)


# ---------------------------------------------------------------------------
# lesions
# ---------------------------------------------------------------------------
def test_lesion_of_zero_branch_is_free_and_restores(rng):
    m = build_model(tiny_resnet(depths=(1, 1), widths=(4, 8), classes=3, image_size=8), 0)
    x, y = rng.standard_normal((40, 3, 8, 8)), rng.integers(0, 3, 40)
    m.params["s2.b0.conv2.w"] = np.zeros_like(m.params["s2.b0.conv2.w"])
    before = m.params.copy()
    clean = m.predict(x)
    drops = dict(ft.lesion_sweep(m, x, y))
    assert drops["s2.b0"] == 0.0 and set(drops) == {"s1.b0", "s2.b0"}
    assert m.params.equal(before)
    np.testing.assert_array_equal(m.predict(x), clean)


def test_lesion_rejects_non_residual_unit(rng):
    m = build_model(tiny_resnet(depths=(1, 1), widths=(4, 8), classes=3, image_size=8), 0)
    from msalab.models import SpecError
    with pytest.raises(SpecError):
        ft.lesion_sweep(m, rng.standard_normal((4, 3, 8, 8)), np.zeros(4, int), ["stem"])


# ---------------------------------------------------------------------------
# calibration
# ---------------------------------------------------------------------------
def test_perfectly_calibrated_predictor_has_zero_ece():
    conf = np.repeat([0.25, 0.75], 4)
    hit = np.array([1, 0, 0, 0, 1, 1, 1, 0])
    assert ft.calibration(conf, hit, bins=4).ece == 0.0


def test_confident_wrong_predictor_has_unit_ece():
    rel = ft.calibration(np.ones(10), np.zeros(10), bins=10)
    assert rel.ece == 1.0 and rel.count[-1] == 10


def test_ece_matches_direct_recomputation(rng):
    logits, labels = rng.standard_normal((200, 2)), np.repeat([0, 1], 100)
    rel = ft.reliability_from_logits(logits, labels, bins=10)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    conf, hit = p.max(axis=1), (p.argmax(axis=1) == labels)
    ece = 0.0
    for b in range(10):
        lo, hi = b / 10, (b + 1) / 10
        sel = [i for i in range(200) if lo < conf[i] <= hi]
        if sel:
            ece += len(sel) / 200 * abs(np.mean(hit[sel]) - np.mean(conf[sel]))
    assert rel.ece == pytest.approx(ece, abs=1e-15)
    for bins in (1, 5, 30):
        r = ft.reliability_from_logits(logits, labels, bins)
        assert r.count.sum() == 200 and 0 <= r.ece <= 1
    with pytest.raises(ValueError):
        ft.calibration([0.5], [1], bins=0)
