"""Deterministic SVG plot emission with paired CSV data files.

Every figure is written as a self-contained SVG built from fixed-precision
coordinates, so re-running on the same inputs produces byte-identical files.
Each plot is paired with a CSV holding exactly the plotted data.
"""
from __future__ import annotations

import csv
import os
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from rakugo_tts.evalstats import (
    ABS_SYSTEM,
    AcousticReport,
    OlsFit,
    QUESTIONS,
    QUESTION_TEXT,
    ScoreRecord,
    mean_scores_by_system,
    ols_regression,
)

WIDTH, HEIGHT = 720, 440
MARGIN_LEFT, MARGIN_RIGHT = 70, 20
MARGIN_TOP, MARGIN_BOTTOM = 40, 70


def _fmt(value: float) -> str:
    return f"{value:.3f}"


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")
    )


class _Svg:
    def __init__(self, title: str):
        self.parts: List[str] = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
            f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
            f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.0f}" y="24" text-anchor="middle" '
            f'font-family="sans-serif" font-size="15">{_escape(title)}</text>',
        ]

    def line(self, x1, y1, x2, y2, color="black", width=1.0, dash: str = ""):
        dash_attr = f' stroke-dasharray="{dash}"' if dash else ""
        self.parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{color}" stroke-width="{width}"{dash_attr}/>'
        )

    def rect(self, x, y, w, h, fill="none", stroke="black"):
        self.parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
            f'fill="{fill}" stroke="{stroke}"/>'
        )

    def circle(self, x, y, r=3.0, fill="steelblue"):
        self.parts.append(
            f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="{_fmt(r)}" fill="{fill}"/>'
        )

    def polygon(self, points: Sequence[Tuple[float, float]], fill, opacity=0.3):
        coords = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self.parts.append(
            f'<polygon points="{coords}" fill="{fill}" fill-opacity="{opacity}" stroke="none"/>'
        )

    def text(self, x, y, content, size=11, anchor="middle", rotate: Optional[float] = None):
        transform = f' transform="rotate({_fmt(rotate)} {_fmt(x)} {_fmt(y)})"' if rotate else ""
        self.parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" text-anchor="{anchor}" '
            f'font-family="sans-serif" font-size="{size}"{transform}>{_escape(content)}</text>'
        )

    def plus(self, x, y, size=5.0, color="crimson"):
        self.line(x - size, y, x + size, y, color=color, width=1.6)
        self.line(x, y - size, x, y + size, color=color, width=1.6)

    def render(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def _value_axis(lo: float, hi: float) -> Tuple[float, float, List[float]]:
    if hi <= lo:
        hi = lo + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    ticks = list(np.linspace(lo, hi, 6))
    return lo, hi, ticks


def _y_map(lo: float, hi: float):
    span = HEIGHT - MARGIN_TOP - MARGIN_BOTTOM

    def to_y(v: float) -> float:
        return MARGIN_TOP + span * (1.0 - (v - lo) / (hi - lo))

    return to_y


def _x_map(lo: float, hi: float):
    span = WIDTH - MARGIN_LEFT - MARGIN_RIGHT

    def to_x(v: float) -> float:
        return MARGIN_LEFT + span * (v - lo) / (hi - lo)

    return to_x


def _draw_y_axis(svg: _Svg, ticks: Sequence[float], to_y, label: str):
    x0 = MARGIN_LEFT
    svg.line(x0, MARGIN_TOP, x0, HEIGHT - MARGIN_BOTTOM)
    for tick in ticks:
        y = to_y(tick)
        svg.line(x0 - 4, y, x0, y)
        svg.text(x0 - 8, y + 4, f"{tick:.2f}", anchor="end", size=10)
    svg.text(18, (MARGIN_TOP + HEIGHT - MARGIN_BOTTOM) / 2, label, rotate=-90.0)


def box_plot(
    svg_path: str,
    csv_path: str,
    groups: Mapping[str, Sequence[float]],
    title: str,
    ylabel: str,
) -> None:
    """Box plot (quartile box, median line, min/max whiskers) per group."""
    if not groups:
        raise ValueError("no groups to plot")
    names = list(groups)
    all_values = np.concatenate([np.asarray(groups[n], dtype=np.float64) for n in names])
    lo, hi, ticks = _value_axis(float(all_values.min()), float(all_values.max()))
    to_y = _y_map(lo, hi)
    svg = _Svg(title)
    _draw_y_axis(svg, ticks, to_y, ylabel)

    plot_width = WIDTH - MARGIN_LEFT - MARGIN_RIGHT
    slot = plot_width / len(names)
    box_w = min(40.0, 0.6 * slot)
    for i, name in enumerate(names):
        values = np.asarray(groups[name], dtype=np.float64)
        q1, median, q3 = np.percentile(values, [25, 50, 75])
        center = MARGIN_LEFT + slot * (i + 0.5)
        svg.line(center, to_y(values.min()), center, to_y(q1))
        svg.line(center, to_y(q3), center, to_y(values.max()))
        svg.rect(center - box_w / 2, to_y(q3), box_w, to_y(q1) - to_y(q3), fill="lightsteelblue")
        svg.line(center - box_w / 2, to_y(median), center + box_w / 2, to_y(median), width=2.0)
        svg.text(center, HEIGHT - MARGIN_BOTTOM + 14, name, size=9, rotate=35.0, anchor="start")
    svg.line(MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM, WIDTH - MARGIN_RIGHT, HEIGHT - MARGIN_BOTTOM)

    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(svg.render())
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "value"])
        for name in names:
            for value in groups[name]:
                writer.writerow([name, repr(float(value))])


def scatter_plot(
    svg_path: str,
    csv_path: str,
    x: Sequence[float],
    y: Sequence[float],
    title: str,
    xlabel: str,
    ylabel: str,
    fit: Optional[OlsFit] = None,
    excluded: Optional[Tuple[Sequence[float], Sequence[float]]] = None,
) -> None:
    """Scatter plot with optional regression line, 95% band, and excluded
    points drawn as plus marks that take no part in the fit."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0:
        raise ValueError("no points to plot")
    ex = np.asarray(excluded[0], dtype=np.float64) if excluded else np.zeros(0)
    ey = np.asarray(excluded[1], dtype=np.float64) if excluded else np.zeros(0)
    all_x = np.concatenate([x, ex]) if ex.size else x
    all_y = np.concatenate([y, ey]) if ey.size else y
    xlo, xhi, xticks = _value_axis(float(all_x.min()), float(all_x.max()))

    band_lo = band_hi = None
    grid = np.linspace(xlo, xhi, 50)
    if fit is not None:
        band_lo, fitted, band_hi = fit.band(grid)
        ylo_candidates = [float(all_y.min()), float(band_lo.min())]
        yhi_candidates = [float(all_y.max()), float(band_hi.max())]
    else:
        ylo_candidates = [float(all_y.min())]
        yhi_candidates = [float(all_y.max())]
    ylo, yhi, yticks = _value_axis(min(ylo_candidates), max(yhi_candidates))

    to_x = _x_map(xlo, xhi)
    to_y = _y_map(ylo, yhi)
    svg = _Svg(title)
    _draw_y_axis(svg, yticks, to_y, ylabel)
    svg.line(MARGIN_LEFT, HEIGHT - MARGIN_BOTTOM, WIDTH - MARGIN_RIGHT, HEIGHT - MARGIN_BOTTOM)
    for tick in xticks:
        px = to_x(tick)
        svg.line(px, HEIGHT - MARGIN_BOTTOM, px, HEIGHT - MARGIN_BOTTOM + 4)
        svg.text(px, HEIGHT - MARGIN_BOTTOM + 18, f"{tick:.2f}", size=10)
    svg.text((MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2, HEIGHT - 18, xlabel)

    if fit is not None:
        band = [(to_x(g), to_y(v)) for g, v in zip(grid, band_hi)]
        band += [(to_x(g), to_y(v)) for g, v in zip(grid[::-1], band_lo[::-1])]
        svg.polygon(band, fill="lightblue")
        svg.line(
            to_x(grid[0]), to_y(fit.predict([grid[0]])[0]),
            to_x(grid[-1]), to_y(fit.predict([grid[-1]])[0]),
            color="steelblue", width=2.0,
        )
    for px, py in zip(x, y):
        svg.circle(to_x(px), to_y(py))
    for px, py in zip(ex, ey):
        svg.plus(to_x(px), to_y(py))

    with open(svg_path, "w", encoding="utf-8") as fh:
        fh.write(svg.render())
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "in_fit"])
        for px, py in zip(x, y):
            writer.writerow([repr(float(px)), repr(float(py)), 1])
        for px, py in zip(ex, ey):
            writer.writerow([repr(float(px)), repr(float(py)), 0])


def _paired_question_scores(
    records: Sequence[ScoreRecord], question_a: str, question_b: str
) -> Tuple[List[float], List[float]]:
    by_cell: Dict[Tuple[str, str, str], Dict[str, float]] = {}
    for r in records:
        by_cell.setdefault((r.listener, r.story, r.system), {})[r.question] = r.score
    xs, ys = [], []
    for scores in by_cell.values():
        if question_a in scores and question_b in scores:
            xs.append(scores[question_a])
            ys.append(scores[question_b])
    return xs, ys


def emit_plots(
    records: Sequence[ScoreRecord],
    out_dir: str,
    acoustic: Optional[AcousticReport] = None,
    reference_system: str = ABS_SYSTEM,
) -> List[str]:
    """Write the standard evaluation figures and their CSVs; returns the paths.

    Emits one score box plot per question, scatter plots of each early
    question against the entertainment question, and, when an acoustic report
    carries fits, variability-versus-score scatters with the reference system
    drawn as excluded plus marks.
    """
    if not records:
        raise ValueError("no records to plot")
    os.makedirs(out_dir, exist_ok=True)
    written: List[str] = []

    questions = [q for q in QUESTIONS if any(r.question == q for r in records)]
    for question in questions:
        groups: Dict[str, List[float]] = {}
        for r in records:
            if r.question == question:
                groups.setdefault(r.system, []).append(r.score)
        svg_path = os.path.join(out_dir, f"scores_{question}.svg")
        csv_path = os.path.join(out_dir, f"scores_{question}.csv")
        box_plot(
            svg_path,
            csv_path,
            {name: groups[name] for name in sorted(groups)},
            title=f"{question}: {QUESTION_TEXT.get(question, question)}",
            ylabel="normalized score",
        )
        written += [svg_path, csv_path]

    if "Q4" in questions:
        for question in [q for q in ("Q1", "Q2", "Q3") if q in questions]:
            xs, ys = _paired_question_scores(records, question, "Q4")
            if len(xs) < 3:
                continue
            fit = None
            if len(set(xs)) > 1:
                fit = ols_regression(xs, ys)
            svg_path = os.path.join(out_dir, f"corr_{question}_Q4.svg")
            csv_path = os.path.join(out_dir, f"corr_{question}_Q4.csv")
            scatter_plot(
                svg_path, csv_path, xs, ys,
                title=f"{question} vs Q4",
                xlabel=f"{question} score", ylabel="Q4 score", fit=fit,
            )
            written += [svg_path, csv_path]

    if acoustic is not None and acoustic.rows:
        scores = mean_scores_by_system(records, "Q4")
        for measure, fit in (("f0", acoustic.f0_fit), ("rate", acoustic.rate_fit)):
            rows = [r for r in acoustic.rows if r.system in scores]
            fitted_rows = [r for r in rows if r.system != reference_system]
            excluded_rows = [r for r in rows if r.system == reference_system]
            if not fitted_rows:
                continue
            values = lambda row: row.f0_cov if measure == "f0" else row.rate_cov
            svg_path = os.path.join(out_dir, f"{measure}_cov_Q4.svg")
            csv_path = os.path.join(out_dir, f"{measure}_cov_Q4.csv")
            scatter_plot(
                svg_path, csv_path,
                [values(r) for r in fitted_rows],
                [scores[r.system] for r in fitted_rows],
                title=f"{measure} variability vs Q4",
                xlabel=f"{measure} CoV", ylabel="mean Q4 score",
                fit=fit,
                excluded=(
                    [values(r) for r in excluded_rows],
                    [scores[r.system] for r in excluded_rows],
                ) if excluded_rows else None,
            )
            written += [svg_path, csv_path]
    return written
