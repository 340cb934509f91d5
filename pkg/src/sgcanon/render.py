"""SVG output: layouts as boxes, report CSVs as line charts.

Both writers emit plain standalone SVG text with fixed number formatting,
so the same input always produces byte-identical output.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

from .sg_core import Layout, SceneGraph

PALETTE = (
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
    "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
)


def category_color(category: int) -> str:
    return PALETTE[category % len(PALETTE)]


def _num(x: float) -> str:
    s = f"{x:.2f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def _label(graph: SceneGraph, k: int) -> str:
    obj = graph.objects[k]
    name = graph.vocab.categories[obj.category]
    if obj.attributes:
        name += " " + ",".join(f"{a}={v}" for a, v in obj.attributes)
    return name


def rasterize(layout: Layout, graph: SceneGraph | None = None, size: int = 256) -> str:
    """One rectangle (and a category label when a graph is given) per box."""
    if graph is not None:
        layout.check_nodes(graph)
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
        f'viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="#ffffff" stroke="#000000"/>',
    ]
    for k, (x0, y0, x1, y1) in enumerate(layout.boxes):
        cat = graph.objects[k].category if graph is not None else 0
        color = category_color(cat)
        lines.append(
            f'<rect x="{_num(x0 * size)}" y="{_num(y0 * size)}" width="{_num((x1 - x0) * size)}" '
            f'height="{_num((y1 - y0) * size)}" fill="{color}" fill-opacity="0.25" stroke="{color}"/>'
        )
        if graph is not None:
            lines.append(
                f'<text x="{_num(x0 * size + 2)}" y="{_num(y0 * size + 10)}" font-size="9" '
                f'fill="{color}">{escape(_label(graph, k))}</text>'
            )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def line_chart(
    series: dict[str, Sequence[tuple[float, float]]],
    title: str = "",
    xlabel: str = "",
    ylabel: str = "",
    width: int = 480,
    height: int = 320,
) -> str:
    """Minimal multi-series line chart with axis ranges from the data."""
    pad_l, pad_r, pad_t, pad_b = 50, 120, 30, 40
    pts = [p for s in series.values() for p in s]
    if pts:
        xs, ys = [p[0] for p in pts], [p[1] for p in pts]
        x_lo, x_hi = min(xs), max(xs)
        y_lo, y_hi = min(min(ys), 0.0), max(ys)
    else:
        x_lo, x_hi, y_lo, y_hi = 0.0, 1.0, 0.0, 1.0
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    pw, ph = width - pad_l - pad_r, height - pad_t - pad_b

    def sx(x):
        return pad_l + (x - x_lo) / (x_hi - x_lo) * pw

    def sy(y):
        return pad_t + ph - (y - y_lo) / (y_hi - y_lo) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="#ffffff"/>',
        f'<line x1="{pad_l}" y1="{pad_t + ph}" x2="{pad_l + pw}" y2="{pad_t + ph}" stroke="#000000"/>',
        f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{pad_t + ph}" stroke="#000000"/>',
        f'<text x="{pad_l}" y="{pad_t - 10}" font-size="12">{escape(title)}</text>',
        f'<text x="{pad_l + pw / 2:.1f}" y="{height - 8}" font-size="10" text-anchor="middle">{escape(xlabel)}</text>',
        f'<text x="12" y="{pad_t + ph / 2:.1f}" font-size="10" transform="rotate(-90 12 {pad_t + ph / 2:.1f})" '
        f'text-anchor="middle">{escape(ylabel)}</text>',
    ]
    for v, anchor in ((x_lo, "start"), (x_hi, "end")):
        out.append(f'<text x="{_num(sx(v))}" y="{pad_t + ph + 14}" font-size="9" text-anchor="{anchor}">{v:g}</text>')
    for v in (y_lo, y_hi):
        out.append(f'<text x="{pad_l - 4}" y="{_num(sy(v) + 3)}" font-size="9" text-anchor="end">{v:.3g}</text>')
    for k, (name, s) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        s = sorted(s)
        if s:
            path = " ".join(f"{_num(sx(x))},{_num(sy(y))}" for x, y in s)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = pad_t + 12 * k + 6
        out.append(f'<line x1="{pad_l + pw + 8}" y1="{ly}" x2="{pad_l + pw + 22}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{pad_l + pw + 26}" y="{ly + 3}" font-size="9">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def chart_from_csv(path, x: str, y: str, group: Sequence[str] = (), **kw) -> str:
    """Line chart of column ``y`` against ``x``, one series per ``group`` key."""
    series: dict[str, list[tuple[float, float]]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row.get("status", "ok") != "ok":
                continue
            try:
                px, py = float(row[x]), float(row[y])
            except (KeyError, ValueError):
                continue
            name = " ".join(row[g] for g in group) or y
            series.setdefault(name, []).append((px, py))
    return line_chart(series, xlabel=x, ylabel=y, **kw)


def render_report(report_dir) -> list[Path]:
    """Charts for whatever report CSVs ``report_dir`` holds."""
    d = Path(report_dir)
    made = []
    jobs = [
        ("grid.csv", "objects", "miou", ("mode", "layers"), "mIOU vs objects"),
        ("generalization.csv", "eval_objects", "miou", ("mode",), "mIOU vs evaluation objects"),
    ]
    for name, x, y, group, title in jobs:
        if (d / name).exists():
            out = d / (Path(name).stem + ".svg")
            out.write_text(chart_from_csv(d / name, x, y, group, title=title))
            made.append(out)
    for rep in sorted(d.glob("cells/*/report.csv")):
        with open(rep, newline="") as fh:
            header = next(csv.reader(fh), [])
        series: dict[str, list[tuple[float, float]]] = {c: [] for c in header if c.startswith("p_trans[")}
        with open(rep, newline="") as fh:
            for row in csv.DictReader(fh):
                for c in series:
                    series[c].append((float(row["epoch"]), float(row[c])))
        out = rep.parent / "p_trans.svg"
        out.write_text(line_chart(series, title=rep.parent.name, xlabel="epoch", ylabel="p_trans"))
        made.append(out)
    return made
