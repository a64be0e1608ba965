import numpy as np
import pytest

from msalab import experiments as ex
from msalab.io.report import read_csv
from msalab.models import alternet, build_model, make_preset, tiny_resnet


def test_non_increasing_allows_one_small_rise():
    assert ex.non_increasing([4, 3, 2, 1])
    assert ex.non_increasing([4, 4, 2])
    assert ex.non_increasing([4, 4.1, 3, 2])
    assert not ex.non_increasing([4, 4.5, 3, 2])
    assert not ex.non_increasing([4, 4.1, 3, 3.1])
    assert not ex.non_increasing([4, 4.1, 3, 3.1], allowed=1)
    assert ex.non_increasing([4, 4.1, 3, 3.1], allowed=2)


def test_latter_half_of_vit_blocks():
    m = build_model(make_preset("tiny_vit"), 0)
    msa = [p for p in m.block_paths() if m.block_kind(p) == "MSA"]
    assert ex.latter_half(m, msa) == ["s1.b4", "s1.b6"]


def test_protocol_warmup_prefix_is_shared():
    p = ex.Protocol(n_train=40, n_test=10, epochs=4, warmup_epochs=1, batch_size=16)
    a = ex.train_preset("tiny_pit", p, 0, stop_epoch=1)
    b = ex.train_preset("tiny_pit", p, 0)
    assert np.array_equal(a.at("warmup").params.flatten(), b.at("warmup").params.flatten())


def test_alternet_without_msas_trains_like_tiny_resnet():
    p = ex.Protocol(n_train=40, n_test=10, epochs=2, warmup_epochs=1, batch_size=16)
    a = ex.train_spec(alternet(0), p, 0)
    b = ex.train_spec(tiny_resnet(), p, 0)
    assert np.array_equal(a.model.params.flatten(), b.model.params.flatten())
    assert a.metrics == b.metrics


def test_stage_lesion_drops_and_band_gap_shapes():
    p = ex.Protocol(n_train=40, n_test=20)
    _, te = p.data()
    m = build_model(make_preset("tiny_resnet"), 0)
    first, last = ex.stage_lesion_drops(m, te.images, te.labels)
    assert -1 <= first <= 1 and -1 <= last <= 1
    g = ex.band_drop_gap(m, te.images, te.labels, 0.0)
    assert len(g["sweep"]) == 10 and g["gap"] == 0.0


def test_block_trends_fractions():
    p = ex.Protocol(n_train=8, n_test=8)
    _, te = p.data()
    tr = ex.block_trends(build_model(make_preset("tiny_vit"), 0), te.images)
    for key in ("late_msa_lowpass", "mlp_highpass", "msa_var_reduce", "mlp_var_increase"):
        assert 0.0 <= tr[key] <= 1.0
    assert set(tr["delta"]) == set(tr["variance"]) == set(["stem"] + [f"s1.b{i}" for i in range(8)])


def test_alternet_report_files(tmp_path):
    p = ex.Protocol(n_train=20, n_test=10, epochs=1, warmup_epochs=0, batch_size=10)
    curve = ex.alternet_curve(p, range(2))
    paths = ex.write_alternet_report(curve, tmp_path)
    rows = read_csv(paths[0])
    assert [int(r["n_msa"]) for r in rows] == [0, 1]
    assert paths[1].read_text().startswith("<svg")


def test_curvature_summary_without_positive_eigenvalues():
    from msalab.hessian import SpectrumRecord
    s = ex.curvature_summary([SpectrumRecord("warmup", 0, [-1.0, -2.0])])
    assert s["nep"] == 1.0 and np.isnan(s["ape"])


@pytest.mark.parametrize("name", ["tiny_resnet", "tiny_vit"])
def test_warmup_spectrum_counts(name):
    p = ex.Protocol(n_train=32, n_test=8, epochs=2, warmup_epochs=1, batch_size=16)
    recs = ex.warmup_spectrum(name, p, ex.SpectrumProtocol(batches=1, k=2, max_iters=5))
    assert len(recs) == 1 and len(recs[0].eigenvalues) == 2
