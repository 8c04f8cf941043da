"""Reliability-diagram CSVs and SVG line plots from a sweep's curve file."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

from .data import format_float
from .sweep import CURVE_COLUMNS, METHOD_ORDER, alpha_label, cell_key, parse_alpha

SIZE = 320
MARGIN = 40
PALETTE = ("#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02", "#a6761d", "#666666",
           "#1f78b4", "#b2df8a", "#fb9a99", "#cab2d6")


def read_curves(path) -> dict[str, dict]:
    """``{method: {alpha: [(nominal, empirical), ...]}}`` from a curves CSV.

    Malformed input raises ``ValueError`` naming the offending line.
    """
    curves: dict[str, dict] = defaultdict(lambda: defaultdict(list))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CURVE_COLUMNS:
            raise ValueError(f"{path}:1: expected header {','.join(CURVE_COLUMNS)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(CURVE_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(CURVE_COLUMNS)} fields, got {len(row)}")
            method, alpha, nominal, empirical = row
            try:
                if method not in METHOD_ORDER:
                    raise ValueError(f"unknown method {method!r}")
                a = parse_alpha(alpha)
                p, e = float(nominal), float(empirical)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            if not (0.0 <= p <= 1.0 and 0.0 <= e <= 1.0):
                raise ValueError(f"{path}:{lineno}: coverage values must lie in [0, 1]")
            curves[method][a].append((p, e))
    return {m: dict(v) for m, v in curves.items()}


def _xy(p: float, e: float) -> tuple[float, float]:
    """Plot coordinates: nominal to the right, empirical upward."""
    span = SIZE - 2 * MARGIN
    return MARGIN + p * span, SIZE - MARGIN - e * span


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def render_svg(title: str, series: dict) -> str:
    """Line plot of empirical versus nominal coverage with the identity line."""
    x0, y0 = _xy(0.0, 0.0)
    x1, y1 = _xy(1.0, 1.0)
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">',
        f'<rect x="0" y="0" width="{SIZE}" height="{SIZE}" fill="white"/>',
        f'<text x="{SIZE // 2}" y="20" text-anchor="middle" font-size="12">{title}</text>',
        f'<rect x="{_fmt(x0)}" y="{_fmt(y1)}" width="{_fmt(x1 - x0)}" height="{_fmt(y0 - y1)}" '
        'fill="none" stroke="black"/>',
        f'<line class="diagonal" x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x1)}" y2="{_fmt(y1)}" '
        'stroke="black" stroke-dasharray="4 3"/>',
        f'<text x="{SIZE // 2}" y="{SIZE - 10}" text-anchor="middle" font-size="10">nominal coverage</text>',
        f'<text x="12" y="{SIZE // 2}" text-anchor="middle" font-size="10" '
        f'transform="rotate(-90 12 {SIZE // 2})">empirical coverage</text>',
    ]
    for i, (alpha, pts) in enumerate(sorted(series.items(), key=lambda kv: cell_key("none", kv[0]))):
        colour = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in (_xy(p, e) for p, e in [(0.0, 0.0)] + pts + [(1.0, 1.0)]))
        label = alpha_label(alpha)
        out.append(f'<polyline class="curve" data-alpha="{label}" points="{coords}" fill="none" '
                   f'stroke="{colour}" stroke-width="1.5"/>')
        out.append(f'<text x="{MARGIN + 6}" y="{MARGIN + 12 + 12 * i}" font-size="9" fill="{colour}">'
                   f'alpha={label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_reliability_csv(series: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("alpha", "nominal", "empirical"))
        for alpha, pts in sorted(series.items(), key=lambda kv: cell_key("none", kv[0])):
            for p, e in pts:
                w.writerow((alpha_label(alpha), format_float(p), format_float(e)))


def report(curves_path, out_dir) -> list[Path]:
    """Write ``reliability_<method>.csv`` and ``.svg`` for every method present."""
    curves = read_curves(curves_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for method in sorted(curves, key=METHOD_ORDER.index):
        csv_path = out / f"reliability_{method}.csv"
        svg_path = out / f"reliability_{method}.svg"
        write_reliability_csv(curves[method], csv_path)
        svg_path.write_text(render_svg(f"Reliability diagram: {method}", curves[method]))
        written += [csv_path, svg_path]
    return written
