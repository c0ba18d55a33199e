"""Byte-deterministic SVG line charts from metrics CSVs.

Hand-rolled on purpose: a fixed viewbox, one polyline per series, legend
from file stems, six-decimal coordinates. No drawing library, so output is
bit-identical across platforms and reruns.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ParseError

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
           "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
_W, _H = 800, 500
_ML, _MR, _MT, _MB = 70, 20, 30, 50


def read_csv_columns(path) -> dict[str, list[str]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(f"{path}: empty CSV", line=1)
    header = lines[0].split(",")
    cols: dict[str, list[str]] = {h: [] for h in header}
    for ln, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(header):
            raise ParseError(f"{path}: expected {len(header)} fields, "
                             f"got {len(parts)}", line=ln)
        for h, v in zip(header, parts):
            cols[h].append(v)
    return cols


def load_series(path, x_col: str = "step",
                y_col: str = "eval_token_acc") -> list[tuple[float, float]]:
    cols = read_csv_columns(path)
    for c in (x_col, y_col):
        if c not in cols:
            raise ParseError(f"{path}: missing column {c!r}", line=1)
    pts = []
    for ln, (x, y) in enumerate(zip(cols[x_col], cols[y_col]), start=2):
        if y == "" or y == "nan":
            continue
        try:
            pts.append((float(x), float(y)))
        except ValueError as e:
            raise ParseError(f"{path}: {e}", line=ln) from None
    return pts


def _fmt(x: float) -> str:
    return f"{x:.6f}".rstrip("0").rstrip(".")


def _panel(series: dict[str, list[tuple[float, float]]], x0: int, title: str,
           panel_w: int) -> list[str]:
    all_pts = [p for pts in series.values() for p in pts]
    if not all_pts:
        xmin = xmax = ymin = ymax = 0.0
    else:
        xmin = min(p[0] for p in all_pts)
        xmax = max(p[0] for p in all_pts)
        ymin = min(p[1] for p in all_pts)
        ymax = max(p[1] for p in all_pts)
    if xmax == xmin:
        xmax = xmin + 1.0
    if ymax == ymin:
        ymax = ymin + 1.0
    plot_w = panel_w - _ML - _MR
    plot_h = _H - _MT - _MB

    def sx(x):
        return x0 + _ML + (x - xmin) / (xmax - xmin) * plot_w

    def sy(y):
        return _MT + (1.0 - (y - ymin) / (ymax - ymin)) * plot_h

    out = []
    out.append(f'<rect x="{x0 + _ML}" y="{_MT}" width="{plot_w}" '
               f'height="{plot_h}" fill="none" stroke="#333"/>')
    out.append(f'<text x="{x0 + _ML + plot_w // 2}" y="{_MT - 10}" '
               f'text-anchor="middle" font-size="14">{title}</text>')
    for i in range(5):
        fx = xmin + (xmax - xmin) * i / 4
        fy = ymin + (ymax - ymin) * i / 4
        out.append(f'<text x="{_fmt(sx(fx))}" y="{_H - _MB + 18}" '
                   f'text-anchor="middle" font-size="11">{_fmt(fx)}</text>')
        out.append(f'<text x="{x0 + _ML - 6}" y="{_fmt(sy(fy) + 4)}" '
                   f'text-anchor="end" font-size="11">{_fmt(fy)}</text>')
    for idx, (name, pts) in enumerate(series.items()):
        color = _COLORS[idx % len(_COLORS)]
        if len(pts) == 1:
            out.append(f'<circle cx="{_fmt(sx(pts[0][0]))}" '
                       f'cy="{_fmt(sy(pts[0][1]))}" r="4" fill="{color}"/>')
        elif pts:
            coords = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in pts)
            out.append(f'<polyline points="{coords}" fill="none" '
                       f'stroke="{color}" stroke-width="2"/>')
        ly = _MT + 16 + 16 * idx
        lx = x0 + _ML + 8
        out.append(f'<rect x="{lx}" y="{ly - 9}" width="12" height="3" '
                   f'fill="{color}"/>')
        out.append(f'<text x="{lx + 18}" y="{ly}" font-size="11">'
                   f'{name}</text>')
    return out


def emit_plot(csv_paths, out_svg, x_col: str = "step",
              y_col: str = "eval_token_acc", title: str = "") -> None:
    """One panel, one polyline per CSV, legend from filename stems."""
    series = {Path(p).stem: load_series(p, x_col, y_col) for p in csv_paths}
    body = _panel(series, 0, title or y_col, _W)
    _write_svg(out_svg, _W, body)


def emit_two_panel(panels, out_svg, x_col: str = "step",
                   y_col: str = "eval_success") -> None:
    """panels: list of (title, {name: csv_path}); side-by-side layout."""
    body = []
    for i, (title, files) in enumerate(panels):
        series = {name: load_series(p, x_col, y_col)
                  for name, p in files.items()}
        body.extend(_panel(series, i * _W, title, _W))
    _write_svg(out_svg, _W * len(panels), body)


def _write_svg(path, width, body: list[str]) -> None:
    svg = "\n".join(
        [f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {width} {_H}"'
         f' width="{width}" height="{_H}">',
         '<rect width="100%" height="100%" fill="white"/>']
        + body + ["</svg>", ""])
    Path(path).write_text(svg, encoding="utf-8")
