"""Command line entry point: train, analyze, report, selftest."""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import features, fourier, hessian
from .io.config import ANALYSES, ConfigError, RunConfig, load_config, select_analyses
from .io.data import DataError, Dataset, gen_synthetic, load_cifar10_binary
from .io.files import ensure_dir, write_text
from .io.report import read_csv, svg_heatmap, svg_line_plot, write_csv, write_json
from .models import make_preset
from .train import Checkpoint, CheckpointError, load_model, train
from .train.loop import LOG_HEADER

log = logging.getLogger("msalab")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="msalab", description="Train toy vision models and analyze their loss and features.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("train", "train a model from a config"),
                           ("analyze", "run analyses on a checkpoint"),
                           ("report", "render SVG plots from analysis CSVs"),
                           ("selftest", "run the oracle suites")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("--config", required=name in ("train", "analyze"), help="run config file")
        sp.add_argument("--out", help="output directory (defaults to [run] out)")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        if name == "analyze":
            sp.add_argument("--checkpoint", required=True, help="checkpoint file")
            sp.add_argument("--only", help="comma list of analyses (nep/ape select spectra)")
    return p


# ---------------------------------------------------------------------------
def load_datasets(cfg: RunConfig) -> tuple:
    d = cfg.data
    if d.kind == "cifar10":
        if not d.train_path:
            raise ConfigError("[data] train_path is required for cifar10")
        tr = load_cifar10_binary(d.train_path, d.n_train, d.mean, d.std, "train")
        te = (load_cifar10_binary(d.test_path, d.n_test, d.mean, d.std, "test")
              if d.test_path else Dataset(np.zeros((0,) + tr.shape), [], 10, "test"))
        return tr, te
    tr = gen_synthetic(d.synthetic, d.n_train, d.extent, d.classes, seed=cfg.seed * 2 + 1)
    te = gen_synthetic(d.synthetic, d.n_test, d.extent, d.classes, seed=cfg.seed * 2 + 2, split="test")
    return tr, te


def _config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train.seed = args.seed
    if args.out:
        cfg.out = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _config(args)
    spec = make_preset(cfg.preset, **cfg.knobs)
    tr, te = load_datasets(cfg)
    out = ensure_dir(cfg.out)
    write_text(out / "spec.json", spec.to_text() + "\n")
    t0 = time.time()
    result = train(spec, cfg.train, tr, te, out_dir=out)
    last = result.metrics[-1]
    print(f"trained {spec.name} ({result.model.num_params} params) for {cfg.train.epochs} epochs "
          f"in {time.time() - t0:.1f}s: train_nll={last['train_nll']:.4f} test_err={last['test_err']:.4f}")
    print(f"checkpoints: {', '.join(f'ckpt_e{e:03d}.bin' for e in sorted(result.checkpoints))} in {out}")
    return 0


def run_analyses(model, ck: Checkpoint, cfg: RunConfig, names, out: Path, tr, te) -> dict:
    """Run the selected analyses, writing one CSV each plus summary.json."""
    wd = float((ck.config or {}).get("weight_decay", cfg.train.weight_decay))
    tag = ck.tag or f"e{ck.epoch}"
    summary = {"checkpoint": tag, "epoch": ck.epoch, "model": model.spec.name, "analyses": list(names)}
    for name in names:
        opts = cfg.analysis(name)
        if name == "spectra":
            recs = hessian.spectrum(model, tr, batch_size=int(opts.get("batch_size", 16)),
                                    k=int(opts.get("k", 5)),
                                    sample_fraction=float(opts.get("sample_fraction", 0.1)),
                                    weight_decay=wd, seed=cfg.seed,
                                    max_iters=int(opts.get("max_iters", 100)),
                                    tol=float(opts.get("tol", 1e-3)), checkpoint=tag)
            write_csv(out / "spectrum.csv", hessian.SPECTRUM_HEADER, hessian.spectrum_rows(recs))
            summary["nep"] = hessian.nep(recs)
            try:
                summary["ape"] = hessian.ape(recs)
            except hessian.NoPositiveEigenvalues:
                summary["ape"] = None
            summary["skipped_batches"] = [r.warning for r in recs if r.warning]
        elif name == "fourier":
            profs = fourier.layerwise_fourier_report(model, te.images)
            write_csv(out / "fourier.csv", ("layer", "f", "logamp"),
                      [row for p in profs for row in p.to_rows()])
            summary["delta_log_amplitude"] = {p.layer: p.delta for p in profs}
        elif name == "variance":
            vp = features.variance_profile(model, te.images)
            write_csv(out / "variance.csv", ("layer", "variance"), vp.rows())
        elif name == "cka":
            cka = features.cka_matrix(model, te.images, int(opts.get("batch_size", 64)))
            write_csv(out / "cka.csv", ("layer_i", "layer_j", "cka"), cka.rows())
            summary["cka_estimator"] = cka.estimator
            summary["cka_flagged"] = cka.flagged
        elif name == "lesion":
            drops = features.lesion_sweep(model, te.images, te.labels)
            write_csv(out / "lesion.csv", ("unit", "acc_drop"), drops)
        elif name == "landscape":
            steps = int(opts.get("steps", 5))
            span = float(opts.get("span", 1.0))
            grid = np.linspace(-span, span, steps)
            d1 = hessian.filter_normalized_direction(model.params, cfg.seed, model.filter_axes)
            d2 = hessian.filter_normalized_direction(model.params, cfg.seed + 1, model.filter_axes)
            sub = tr.head(int(opts.get("subset", len(tr))))
            land = hessian.loss_surface(model, sub, d1, d2, grid, grid, wd)
            header, rows = land.csv_rows()
            write_csv(out / "landscape.csv", header, rows)
        elif name == "robustness":
            sweep = fourier.frequency_robustness_sweep(
                model, te.images, te.labels, float(opts.get("magnitude", 1.0)),
                width=float(opts.get("width", 0.1 * math.pi)), seed=cfg.seed)
            write_csv(out / "robustness.csv", ("band_center", "acc_drop"), sweep)
        elif name == "reliability":
            rel = features.reliability_diagram(model, te.images, te.labels, int(opts.get("bins", 15)))
            write_csv(out / "reliability.csv", ("bin", "conf", "acc", "count"), rel.rows())
            summary["ece"] = rel.ece
    write_json(out / "summary.json", summary)
    return summary


def cmd_analyze(args) -> int:
    cfg = _config(args)
    try:
        ck = Checkpoint.load(args.checkpoint)
    except OSError as exc:
        raise ConfigError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror or exc}") from exc
    model = load_model(ck)
    names = select_analyses(args.only) if args.only else (list(cfg.selected) or list(ANALYSES))
    tr, te = load_datasets(cfg)
    out = ensure_dir(args.out or cfg.out)
    summary = run_analyses(model, ck, cfg, names, out, tr, te)
    print(f"analyses {', '.join(names)} written to {out}")
    for key in ("nep", "ape", "ece"):
        if key in summary:
            print(f"  {key} = {summary[key]}")
    return 0


def cmd_report(args) -> int:
    if args.out:
        src = Path(args.out)
    elif args.config:
        src = Path(load_config(args.config).out)
    else:
        raise ConfigError("report needs --out or --config")
    if not src.is_dir():
        raise ConfigError(f"no results directory {src}")
    made = []

    def col(rows, key):
        return [float(r[key]) for r in rows]

    if (src / "metrics.csv").exists():
        rows = read_csv(src / "metrics.csv")
        ep = col(rows, "epoch")
        write_text(src / "metrics.svg", svg_line_plot(
            {"train_nll": (ep, col(rows, "train_nll")), "test_err": (ep, col(rows, "test_err"))},
            "Training log", "epoch", "value"))
        made.append("metrics.svg")
    if (src / "spectrum.csv").exists():
        vals = col(read_csv(src / "spectrum.csv"), "eigenvalue")
        counts, edges = hessian.spectrum_histogram(vals)
        mids = 0.5 * (edges[1:] + edges[:-1])
        write_text(src / "spectrum.svg", svg_line_plot({"count": (mids, counts)},
                                                        "Hessian max-eigenvalue spectrum", "eigenvalue", "count"))
        made.append("spectrum.svg")
    if (src / "fourier.csv").exists():
        series = {}
        for r in read_csv(src / "fourier.csv"):
            xs, ys = series.setdefault(r["layer"], ([], []))
            xs.append(float(r["f"]) / math.pi)
            ys.append(float(r["logamp"]))
        base = {k: (xs, [y - ys[0] for y in ys]) for k, (xs, ys) in series.items()}
        write_text(src / "fourier.svg", svg_line_plot(base, "Relative log amplitude", "frequency / pi",
                                                       "log amplitude - log amplitude at 0"))
        made.append("fourier.svg")
    for fname, x, y, title in (("variance.csv", "layer", "variance", "Feature-map variance"),
                               ("lesion.csv", "unit", "acc_drop", "Lesion accuracy drop"),
                               ("robustness.csv", "band_center", "acc_drop", "Frequency-noise accuracy drop"),
                               ("alternet.csv", "n_msa", "test_acc", "Accuracy vs number of MSAs")):
        if (src / fname).exists():
            rows = read_csv(src / fname)
            xs = list(range(len(rows))) if x in ("layer", "unit") else col(rows, x)
            write_text(src / fname.replace(".csv", ".svg"),
                       svg_line_plot({y: (xs, col(rows, y))}, title, x, y))
            made.append(fname.replace(".csv", ".svg"))
    if (src / "reliability.csv").exists():
        rows = [r for r in read_csv(src / "reliability.csv") if int(r["count"]) > 0]
        write_text(src / "reliability.svg", svg_line_plot(
            {"accuracy": (col(rows, "conf"), col(rows, "acc")), "ideal": ([0, 1], [0, 1])},
            "Reliability diagram", "confidence", "accuracy"))
        made.append("reliability.svg")
    if (src / "cka.csv").exists():
        rows = read_csv(src / "cka.csv")
        layers = list(dict.fromkeys(r["layer_i"] for r in rows))
        idx = {l: i for i, l in enumerate(layers)}
        m = np.full((len(layers), len(layers)), np.nan)
        for r in rows:
            m[idx[r["layer_i"]], idx[r["layer_j"]]] = float(r["cka"])
        write_text(src / "cka.svg", svg_heatmap(m, layers, "Mini-batch CKA"))
        made.append("cka.svg")
    print(f"rendered {', '.join(made) if made else 'nothing'} in {src}")
    return 0


def cmd_selftest(args) -> int:
    from .selftest import run_selftest
    return 0 if run_selftest(print) else 1


COMMANDS = {"train": cmd_train, "analyze": cmd_analyze, "report": cmd_report, "selftest": cmd_selftest}


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DataError, CheckpointError) as exc:
        print(f"msalab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"msalab {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main():
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
