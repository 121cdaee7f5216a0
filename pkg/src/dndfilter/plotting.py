"""Dependency-free CSV + SVG output for trajectories and loss curves."""

from __future__ import annotations

import xml.etree.ElementTree as ET
from pathlib import Path

import numpy as np

from .errors import UsageError

_W, _H, _PAD = 720, 240, 42


def _panel(parent, x_vals, series, y_label, shade_mask=None, offset_y=0):
    """One time-series panel with optional shaded vertical bands."""
    lo = min(float(np.min(s)) for _, s, _ in series)
    hi = max(float(np.max(s)) for _, s, _ in series)
    if hi - lo < 1e-9:
        hi = lo + 1.0
    x0, x1 = float(x_vals[0]), float(x_vals[-1])
    span_x = max(x1 - x0, 1e-9)

    def sx(x):
        return _PAD + (x - x0) / span_x * (_W - 2 * _PAD)

    def sy(y):
        return offset_y + _H - _PAD - (y - lo) / (hi - lo) * (_H - 2 * _PAD)

    g = ET.SubElement(parent, "g")
    if shade_mask is not None:
        run = None
        for i, flag in enumerate(list(shade_mask) + [0]):
            if flag and run is None:
                run = i
            elif not flag and run is not None:
                ET.SubElement(g, "rect", {
                    "x": f"{sx(x_vals[run]):.2f}",
                    "y": f"{offset_y + _PAD:.2f}",
                    "width": f"{max(sx(x_vals[min(i, len(x_vals) - 1)]) - sx(x_vals[run]), 1.0):.2f}",
                    "height": f"{_H - 2 * _PAD:.2f}",
                    "fill": "#d9d9d9",
                })
                run = None
    ET.SubElement(g, "rect", {
        "x": str(_PAD), "y": str(offset_y + _PAD),
        "width": str(_W - 2 * _PAD), "height": str(_H - 2 * _PAD),
        "fill": "none", "stroke": "#333",
    })
    for name, vals, color in series:
        pts = " ".join(f"{sx(x):.2f},{sy(v):.2f}" for x, v in zip(x_vals, vals))
        ET.SubElement(g, "polyline", {
            "points": pts, "fill": "none", "stroke": color, "stroke-width": "1.5",
        })
    label = ET.SubElement(g, "text", {
        "x": str(_PAD), "y": str(offset_y + _PAD - 8), "font-size": "12",
        "font-family": "sans-serif",
    })
    label.text = y_label + "   [" + ", ".join(f"{n}:{c}" for n, vals, c in series) + "]"
    for frac in (0.0, 0.5, 1.0):
        tick = ET.SubElement(g, "text", {
            "x": f"{sx(x0 + frac * span_x):.2f}",
            "y": str(offset_y + _H - _PAD + 14),
            "font-size": "10", "font-family": "sans-serif", "text-anchor": "middle",
        })
        tick.text = f"{x0 + frac * span_x:.0f}"
    for frac, val in ((0.0, lo), (1.0, hi)):
        tick = ET.SubElement(g, "text", {
            "x": str(_PAD - 4), "y": f"{sy(val) + 3:.2f}", "font-size": "10",
            "font-family": "sans-serif", "text-anchor": "end",
        })
        tick.text = f"{val:.3g}"


def _svg_root(n_panels, title):
    root = ET.Element("svg", {
        "xmlns": "http://www.w3.org/2000/svg",
        "width": str(_W), "height": str(_H * n_panels),
        "viewBox": f"0 0 {_W} {_H * n_panels}",
    })
    desc = ET.SubElement(root, "desc")
    desc.text = title
    return root


def write_trajectory_svg(path, t_vals, gt: np.ndarray, est: np.ndarray,
                         occluded, dim_names, title: str):
    """Per-dimension panels: ground truth vs estimate with occlusion bands."""
    if len(t_vals) == 0:
        raise UsageError("trajectory plot: empty input")
    root = _svg_root(len(dim_names), title)
    for d, name in enumerate(dim_names):
        _panel(root, t_vals,
               [("truth", gt[:, d], "#1f77b4"), ("estimate", est[:, d], "#d62728")],
               name, shade_mask=occluded, offset_y=d * _H)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(root).write(path, xml_declaration=True, encoding="utf-8")


def write_curves_svg(path, curves_by_label: dict[str, list[float]], title: str):
    if not curves_by_label or not any(len(v) for v in curves_by_label.values()):
        raise UsageError("curve plot: empty input")
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
    series = []
    n = max(len(v) for v in curves_by_label.values())
    for i, (label, vals) in enumerate(sorted(curves_by_label.items())):
        padded = list(vals) + [vals[-1]] * (n - len(vals))
        series.append((label, np.asarray(padded, dtype=float), palette[i % len(palette)]))
    root = _svg_root(1, title)
    _panel(root, np.arange(n), series, "loss")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    ET.ElementTree(root).write(path, xml_declaration=True, encoding="utf-8")


def write_csv(path, header_comments: list[str], columns: list[str],
              rows: list[list]) -> None:
    """Plain CSV with '#' metadata lines; floats use repr for exact
    parse-back."""
    lines = [f"# {c}" for c in header_comments]
    lines.append(",".join(columns))
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")


def read_csv(path):
    """Returns (comments, columns, rows as strings)."""
    comments, columns, rows = [], None, []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif columns is None:
            columns = line.split(",")
        elif line:
            rows.append(line.split(","))
    return comments, columns, rows
