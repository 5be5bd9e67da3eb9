"""Deterministic SVG line charts of trace CSVs."""

from __future__ import annotations

import csv
import math
import xml.etree.ElementTree as ET
from pathlib import Path

__all__ = ["PlotError", "read_series", "render_svg", "plot_csvs"]

WIDTH, HEIGHT = 640, 420
MARGIN = dict(left=70, right=150, top=20, bottom=50)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


class PlotError(ValueError):
    pass


def read_series(path, x: str, y: str):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = tuple(reader.fieldnames or ())
        pts = []
        for row in reader:
            try:
                pts.append((float(row[x]), float(row[y])))
            except (KeyError, ValueError, TypeError):
                continue
    if x not in header or y not in header:
        raise PlotError(f"{path}: columns {x!r} and {y!r} are required")
    if not pts:
        raise PlotError(f"{path}: no rows")
    return header, pts


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo, hi, log):
    if log:
        return [10.0 ** e for e in range(math.floor(lo), math.ceil(hi) + 1)]
    span = hi - lo or 1.0
    step = 10 ** math.floor(math.log10(span / 5))
    for mult in (1, 2, 5, 10):
        if span / (step * mult) <= 6:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def render_svg(series, xlabel: str, ylabel: str, logy: bool = False) -> str:
    """``series`` is a list of ``(label, [(x, y), ...])``; returns SVG text."""
    if not series:
        raise PlotError("no rows")
    tf = (lambda v: math.log10(v)) if logy else (lambda v: v)
    pts_all = [(px, py) for _, pts in series for px, py in pts if not logy or py > 0]
    if not pts_all:
        raise PlotError("no positive values for a log axis")
    xs = [p[0] for p in pts_all]
    ys = [tf(p[1]) for p in pts_all]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if logy:
        y0, y1 = math.floor(y0), math.ceil(y1)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y1 = y0 + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(v):
        return MARGIN["left"] + (v - x0) / (x1 - x0) * pw

    def sy(v):
        return MARGIN["top"] + ph - (v - y0) / (y1 - y0) * ph

    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(WIDTH), height=str(HEIGHT),
                     viewBox=f"0 0 {WIDTH} {HEIGHT}")
    ET.SubElement(svg, "rect", x="0", y="0", width=str(WIDTH), height=str(HEIGHT), fill="white")
    ET.SubElement(svg, "rect", x=_fmt(MARGIN["left"]), y=_fmt(MARGIN["top"]), width=_fmt(pw), height=_fmt(ph),
                  fill="none", stroke="black")
    axis = ET.SubElement(svg, "g", attrib={"font-family": "sans-serif", "font-size": "11"})
    for t in _ticks(x0, x1, False):
        X = sx(t)
        ET.SubElement(axis, "line", x1=_fmt(X), y1=_fmt(MARGIN["top"] + ph), x2=_fmt(X),
                      y2=_fmt(MARGIN["top"] + ph + 4), stroke="black")
        ET.SubElement(axis, "text", x=_fmt(X), y=_fmt(MARGIN["top"] + ph + 16),
                      attrib={"text-anchor": "middle"}).text = f"{t:g}"
    for t in _ticks(y0, y1, logy):
        tv = math.log10(t) if logy else t
        Y = sy(tv)
        ET.SubElement(axis, "line", x1=_fmt(MARGIN["left"] - 4), y1=_fmt(Y), x2=_fmt(MARGIN["left"]),
                      y2=_fmt(Y), stroke="black")
        ET.SubElement(axis, "text", x=_fmt(MARGIN["left"] - 6), y=_fmt(Y + 4),
                      attrib={"text-anchor": "end"}).text = f"{t:g}"
    ET.SubElement(axis, "text", x=_fmt(MARGIN["left"] + pw / 2), y=_fmt(HEIGHT - 12),
                  attrib={"text-anchor": "middle"}).text = xlabel
    ET.SubElement(axis, "text", x="16", y=_fmt(MARGIN["top"] + ph / 2),
                  attrib={"text-anchor": "middle", "transform": f"rotate(-90 16 {_fmt(MARGIN['top'] + ph / 2)})"}
                  ).text = ylabel + (" (log)" if logy else "")
    legend = ET.SubElement(svg, "g", attrib={"font-family": "sans-serif", "font-size": "11"})
    for idx, (label, pts) in enumerate(series):
        color = COLORS[idx % len(COLORS)]
        coords = " ".join(f"{_fmt(sx(px))},{_fmt(sy(tf(py)))}" for px, py in pts if not logy or py > 0)
        ET.SubElement(svg, "polyline", points=coords, fill="none", stroke=color,
                      attrib={"stroke-width": "1.5", "data-label": label})
        ly = MARGIN["top"] + 14 + 18 * idx
        lx = WIDTH - MARGIN["right"] + 10
        ET.SubElement(legend, "line", x1=_fmt(lx), y1=_fmt(ly - 4), x2=_fmt(lx + 20), y2=_fmt(ly - 4),
                      stroke=color, attrib={"stroke-width": "2"})
        ET.SubElement(legend, "text", x=_fmt(lx + 26), y=_fmt(ly)).text = label
    ET.indent(svg)
    return ET.tostring(svg, encoding="unicode") + "\n"


def plot_csvs(paths, output, x: str = "data_passes", y: str = "rel_subopt", logy: bool | None = None,
              labels=None) -> str:
    paths = [Path(p) for p in paths]
    if not paths:
        raise PlotError("no input files")
    series, header0 = [], None
    for i, path in enumerate(paths):
        header, pts = read_series(path, x, y)
        if header0 is None:
            header0 = header
        elif header != header0:
            raise PlotError(f"{path}: schema {header} differs from {header0}")
        series.append((labels[i] if labels else path.stem, pts))
    text = render_svg(series, x, y, logy=(y == "rel_subopt") if logy is None else logy)
    Path(output).write_text(text)
    return text
