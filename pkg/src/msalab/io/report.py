"""CSV / JSON / SVG emission.  Every file lands via an atomic rename."""
from __future__ import annotations

import csv
import io
import json
import math
from html import escape
from pathlib import Path

import numpy as np

from .files import atomic_open, write_text

SCHEMA_VERSION = 1
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f")


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_csv(path, header, rows) -> Path:
    with atomic_open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([float(v) if isinstance(v, np.floating) else v for v in r])
    return Path(path)


def read_csv(path) -> list:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def write_json(path, obj) -> Path:
    payload = _plain(obj)
    if isinstance(payload, dict):
        payload = {"schema_version": SCHEMA_VERSION, **payload}
    return write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# SVG
# ---------------------------------------------------------------------------
def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return list(np.linspace(lo, hi, n))


def svg_line_plot(series: dict, title: str = "", xlabel: str = "", ylabel: str = "",
                  width: int = 480, height: int = 320) -> str:
    """Self-contained SVG with one polyline per (xs, ys) series."""
    ml, mr, mt, mb = 60, 110, 30, 45
    pts = [(float(x), float(y)) for xs, ys in series.values() for x, y in zip(xs, ys)
           if math.isfinite(float(y))]
    xs = [p[0] for p in pts] or [0.0, 1.0]
    ys = [p[1] for p in pts] or [0.0, 1.0]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = width - ml - mr, height - mt - mb

    def sx(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def sy(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    for t in _ticks(x0, x1):
        out.append(f'<text x="{sx(t):.1f}" y="{mt + ph + 14}" text-anchor="middle">{t:.3g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{ml - 4}" y="{sy(t) + 4:.1f}" text-anchor="end">{t:.3g}</text>')
    out.append(f'<text x="{ml + pw / 2}" y="{height - 8}" text-anchor="middle">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{mt + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {mt + ph / 2})">{escape(ylabel)}</text>')
    for i, (name, (sxs, sys_)) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{sx(float(x)):.1f},{sy(float(y)):.1f}" for x, y in zip(sxs, sys_)
                          if math.isfinite(float(y)))
        out.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = mt + 12 + 14 * i
        out.append(f'<line x1="{ml + pw + 8}" y1="{ly - 4}" x2="{ml + pw + 22}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 26}" y="{ly}">{escape(str(name))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def svg_heatmap(matrix, labels=None, title: str = "", cell: int = 18) -> str:
    """Grayscale heatmap for values in [0, 1]."""
    m = np.asarray(matrix, dtype=np.float64)
    n_r, n_c = m.shape
    ml, mt = 70, 30
    width, height = ml + n_c * cell + 10, mt + n_r * cell + 10
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="9">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2}" y="16" text-anchor="middle" font-size="12">{escape(title)}</text>']
    for i in range(n_r):
        for j in range(n_c):
            v = m[i, j]
            shade = 255 if not math.isfinite(v) else int(round(255 * (1.0 - min(max(v, 0.0), 1.0))))
            out.append(f'<rect x="{ml + j * cell}" y="{mt + i * cell}" width="{cell}" height="{cell}" '
                       f'fill="rgb({shade},{shade},{shade})"/>')
        if labels is not None:
            out.append(f'<text x="{ml - 3}" y="{mt + i * cell + cell * 0.7:.1f}" '
                       f'text-anchor="end">{escape(str(labels[i]))}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_report(results, fmt: str, path, header=None, **plot_kw) -> Path:
    """Write ``results`` as csv (rows + header), json or svg (series dict)."""
    if fmt == "csv":
        if header is None:
            raise ValueError("csv output needs a header")
        return write_csv(path, header, results)
    if fmt == "json":
        return write_json(path, results)
    if fmt == "svg":
        if isinstance(results, dict):
            return write_text(path, svg_line_plot(results, **plot_kw))
        return write_text(path, svg_heatmap(results, **plot_kw))
    raise ValueError(f"unknown report format {fmt!r}")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
