"""CED plots: a deterministic hand-written SVG and matplotlib report figures.

The SVG writer avoids any plotting library so that identical inputs give
identical bytes. Report figures go through matplotlib's Agg backend.
"""

from __future__ import annotations

import csv
import math
import os
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .dataio import DataError

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

WIDTH, HEIGHT = 480, 360
LEFT, RIGHT, TOP, BOTTOM = 64, 16, 16, 52


def read_ced_csv(path: str | os.PathLike) -> list[tuple[float, float]]:
    """Parse a ``threshold,fraction`` file; problems raise DataError naming the row."""
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc.strerror})") from exc
    if not rows or [c.strip() for c in rows[0]] != ["threshold", "fraction"]:
        raise DataError(f"{path}: row 1: expected header 'threshold,fraction'")
    points: list[tuple[float, float]] = []
    for n, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != 2:
            raise DataError(f"{path}: row {n}: expected 2 fields, got {len(row)}")
        try:
            t, f = float(row[0]), float(row[1])
        except ValueError:
            raise DataError(f"{path}: row {n}: non-numeric value {row!r}") from None
        if not (math.isfinite(t) and math.isfinite(f)) or not 0.0 <= f <= 1.0:
            raise DataError(f"{path}: row {n}: fraction must be finite and in [0, 1], got {row!r}")
        if points and t <= points[-1][0]:
            raise DataError(f"{path}: row {n}: thresholds must increase")
        points.append((t, f))
    if not points:
        raise DataError(f"{path}: no data rows")
    return points


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def ced_svg(curves: Sequence[tuple[str, Sequence[tuple[float, float]]]], x_max: float | None = None) -> str:
    """Render labelled CED curves as an SVG document string.

    The x range is [0, x_max] (default: largest threshold over all curves);
    the y range is [0, 1]. Points beyond x_max are dropped.
    """
    if not curves:
        raise ValueError("ced_svg: no curves")
    if x_max is None:
        x_max = max(p[0] for _, pts in curves for p in pts)
    if x_max <= 0:
        raise ValueError("ced_svg: x range must be positive")
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(t):
        return LEFT + pw * t / x_max

    def sy(f):
        return TOP + ph * (1.0 - f)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#000"/>',
    ]
    for k in range(6):
        t = x_max * k / 5
        x = _fmt(sx(t))
        out.append(f'<line x1="{x}" y1="{TOP + ph}" x2="{x}" y2="{TOP + ph + 4}" stroke="#000"/>')
        out.append(f'<text x="{x}" y="{TOP + ph + 16}" text-anchor="middle">{t:.3g}</text>')
        f = k / 5
        y = _fmt(sy(f))
        out.append(f'<line x1="{LEFT - 4}" y1="{y}" x2="{LEFT}" y2="{y}" stroke="#000"/>')
        out.append(f'<text x="{LEFT - 7}" y="{y}" text-anchor="end" dominant-baseline="middle">{f:.1f}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">NME</text>')
    out.append(
        f'<text x="14" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {TOP + ph / 2:.2f})">fraction of images</text>'
    )
    for i, (label, pts) in enumerate(curves):
        colour = PALETTE[i % len(PALETTE)]
        coords = " ".join(f"{_fmt(sx(t))},{_fmt(sy(f))}" for t, f in pts if t <= x_max + 1e-12)
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" points="{coords}"/>')
    for i, (label, _) in enumerate(curves):
        colour = PALETTE[i % len(PALETTE)]
        y = TOP + ph - 10 - 16 * (len(curves) - 1 - i)
        x = LEFT + pw - 150
        out.append(f'<line x1="{x}" y1="{y}" x2="{x + 20}" y2="{y}" stroke="{colour}" stroke-width="1.5"/>')
        out.append(f'<text x="{x + 26}" y="{y}" dominant-baseline="middle">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_ced_svg(
    csv_paths: Sequence[str | os.PathLike],
    out_path: str | os.PathLike,
    labels: Sequence[str] | None = None,
    x_max: float | None = None,
) -> Path:
    if labels is not None and len(labels) != len(csv_paths):
        raise ValueError(f"{len(labels)} labels for {len(csv_paths)} curves")
    names = list(labels) if labels is not None else [str(p) for p in csv_paths]
    curves = [(name, read_ced_csv(p)) for name, p in zip(names, csv_paths)]
    out = Path(out_path)
    out.write_text(ced_svg(curves, x_max))
    return out


def write_report_figures(report, out_dir: str | os.PathLike) -> list[Path]:
    """Save ``ced.png`` and ``per_landmark.png`` for an EvalReport."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    fig, ax = plt.subplots(figsize=(5, 4))
    xs = [t for t, _ in report.ced]
    ys = [f for _, f in report.ced]
    ax.plot(xs, ys, label=f"AUC@{report.cutoff:g} = {report.auc:.3f}")
    ax.set_xlim(0, max(xs) if xs else 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("NME")
    ax.set_ylabel("fraction of images")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(out / "ced.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(out / "ced.png")

    fig, ax = plt.subplots(figsize=(max(5, 0.25 * len(report.per_landmark_nme)), 4))
    keys = list(report.per_landmark_nme)
    names = report.landmark_names
    ticks = [names[k] if names and k < len(names) else str(k) for k in keys]
    ax.bar(range(len(keys)), [report.per_landmark_nme[k] for k in keys], color=PALETTE[0])
    ax.set_xticks(range(len(keys)))
    ax.set_xticklabels(ticks, rotation=90 if names else 0, fontsize=7)
    ax.set_xlabel("landmark")
    ax.set_ylabel("NME")
    fig.tight_layout()
    fig.savefig(out / "per_landmark.png", dpi=100, metadata={"Software": None})
    plt.close(fig)
    written.append(out / "per_landmark.png")
    return written
