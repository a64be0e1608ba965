import json

import pytest

from msalab.cli import run_cli
from msalab.io.report import read_csv

CFG = """
[run]
seed = 0
out = {out}

[model]
preset = tiny_vit

[model.knobs]
depth = 1
dim = 8
heads = 2
patch = 4
classes = 3
image_size = 8
in_channels = 3

[train]
epochs = 2
warmup_epochs = 1
batch_size = 16
lr_max = 1e-3

[data]
synthetic = shapes
n_train = 32
n_test = 32
extent = 8
classes = 3

[analysis.spectra]
k = 2
sample_fraction = 0.5
max_iters = 10

[analysis.cka]
batch_size = 8

[analysis.landscape]
steps = 3
subset = 8
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    cfg = out / "run.cfg"
    cfg.write_text(CFG.format(out=out))
    assert run_cli(["train", "--config", str(cfg)]) == 0
    return cfg, out


def test_train_writes_checkpoints_and_metrics(trained):
    _, out = trained
    assert {p.name for p in out.glob("ckpt_*.bin")} == {"ckpt_e000.bin", "ckpt_e001.bin", "ckpt_e002.bin"}
    rows = read_csv(out / "metrics.csv")
    assert list(rows[0]) == ["epoch", "lr", "train_nll", "test_err"] and len(rows) == 3


def test_analyze_only_nep_emits_spectrum_and_summary(trained, tmp_path):
    cfg, out = trained
    dest = tmp_path / "a"
    code = run_cli(["analyze", "--config", str(cfg), "--checkpoint", str(out / "ckpt_e002.bin"),
                    "--only", "nep", "--out", str(dest)])
    assert code == 0
    assert sorted(p.name for p in dest.iterdir()) == ["spectrum.csv", "summary.json"]
    summary = json.loads((dest / "summary.json").read_text())
    assert "nep" in summary and "ape" in summary and summary["schema_version"] == 1
    vals = [float(r["eigenvalue"]) for r in read_csv(dest / "spectrum.csv")]
    assert summary["nep"] == sum(v < 0 for v in vals) / len(vals)


def test_analyze_all_then_report(trained, tmp_path, capsys):
    cfg, out = trained
    dest = tmp_path / "all"
    assert run_cli(["analyze", "--config", str(cfg), "--checkpoint", str(out / "ckpt_e002.bin"),
                    "--out", str(dest)]) == 0
    names = {p.name for p in dest.iterdir()}
    assert {"spectrum.csv", "fourier.csv", "variance.csv", "cka.csv", "lesion.csv", "landscape.csv",
            "robustness.csv", "reliability.csv", "summary.json"} <= names
    assert "ece" in json.loads((dest / "summary.json").read_text())
    assert run_cli(["report", "--out", str(dest)]) == 0
    svgs = {p.name for p in dest.glob("*.svg")}
    assert {"spectrum.svg", "fourier.svg", "cka.svg", "reliability.svg"} <= svgs
    assert all((dest / s).read_text().startswith("<svg") for s in svgs)
    assert not list(dest.glob(".*.tmp"))


def test_seed_override_changes_run(trained, tmp_path):
    cfg, _ = trained
    assert run_cli(["train", "--config", str(cfg), "--out", str(tmp_path), "--seed", "5"]) == 0
    assert (tmp_path / "ckpt_e002.bin").exists()


def test_missing_config_names_path(tmp_path, capsys):
    code = run_cli(["train", "--config", str(tmp_path / "missing.cfg")])
    assert code != 0 and "missing.cfg" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["train"], ["train", "--config", "x", "--nope"], []])
def test_usage_errors(argv, capsys):
    assert run_cli(argv) == 2
    assert "usage" in capsys.readouterr().err


def test_bad_checkpoint_and_analysis_name(trained, tmp_path, capsys):
    cfg, _ = trained
    junk = tmp_path / "junk.bin"
    junk.write_bytes(b"garbage")
    assert run_cli(["analyze", "--config", str(cfg), "--checkpoint", str(junk)]) == 2
    assert run_cli(["analyze", "--config", str(cfg), "--checkpoint", str(tmp_path / "none.bin")]) == 2
    ck = trained[1] / "ckpt_e000.bin"
    assert run_cli(["analyze", "--config", str(cfg), "--checkpoint", str(ck), "--only", "magic"]) == 2


def test_report_without_results_dir(tmp_path):
    assert run_cli(["report", "--out", str(tmp_path / "nothing")]) == 2


def test_selftest_passes(capsys):
    assert run_cli(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "8/8 suites passed" in out and "FAIL" not in out
