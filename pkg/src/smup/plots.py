"""Static SVG 1.1 figures: Taylor diagram, density scatter, SHAP violins.

Taylor geometry: a point with normalised standard deviation ``s`` and
correlation ``r`` sits at polar angle ``arccos(r)`` (measured from the
horizontal axis) and radius ``s``; the reference (perfect model) is at
radius 1, angle 0. Every marker carries ``data-radius`` / ``data-angle``
attributes with those polar coordinates.
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape, quoteattr

import numpy as np

from smup.exceptions import MalformedInputError
from smup.validation import density_bins

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
MARKERS = ["circle", "square", "triangle", "diamond"]
_VIRIDIS = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]


def _f(v: float) -> str:
    return f"{v:.3f}".rstrip("0").rstrip(".") if math.isfinite(v) else "0"


def _doc(width, height, body, title=""):
    head = (
        '<?xml version="1.0" encoding="UTF-8"?>\n'
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">\n'
    )
    if title:
        head += f"<title>{escape(title)}</title>\n"
    return head + '<rect x="0" y="0" width="100%" height="100%" fill="white"/>\n' + "\n".join(body) + "\n</svg>\n"


def _text(x, y, s, size=12, anchor="middle", extra=""):
    return f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" font-size="{size}" text-anchor="{anchor}"{extra}>{escape(str(s))}</text>'


def _marker(kind, x, y, size, color, attrs=""):
    if kind == "square":
        return f'<rect x="{_f(x - size)}" y="{_f(y - size)}" width="{_f(2 * size)}" height="{_f(2 * size)}" fill="{color}"{attrs}/>'
    if kind == "triangle":
        pts = f"{_f(x)},{_f(y - size)} {_f(x - size)},{_f(y + size)} {_f(x + size)},{_f(y + size)}"
        return f'<polygon points="{pts}" fill="{color}"{attrs}/>'
    if kind == "diamond":
        pts = f"{_f(x)},{_f(y - size)} {_f(x + size)},{_f(y)} {_f(x)},{_f(y + size)} {_f(x - size)},{_f(y)}"
        return f'<polygon points="{pts}" fill="{color}"{attrs}/>'
    return f'<circle cx="{_f(x)}" cy="{_f(y)}" r="{_f(size)}" fill="{color}"{attrs}/>'


def write_svg(svg: str, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(svg, encoding="utf-8")
    return path


# -- Taylor diagram -----------------------------------------------------------


def taylor_position(sigma_hat: float, r: float) -> tuple[float, float]:
    """Polar (radius, angle in radians) of a Taylor point."""
    return float(sigma_hat), float(math.acos(max(-1.0, min(1.0, r))))


def taylor_svg(series: list, title: str = "Normalised Taylor diagram", size: int = 520) -> str:
    """``series``: ``[{"name": str, "points": [{"sigma_hat", "r", "label"?}, ...]}, ...]``."""
    pts = [p for s in series for p in s["points"]]
    rmax = max([1.5] + [float(p["sigma_hat"]) * 1.1 for p in pts])
    rmax = math.ceil(rmax * 4) / 4
    half = any(float(p["r"]) < 0 for p in pts)
    margin = 60
    plot = size - 2 * margin
    scale = plot / rmax
    width = size + (plot if half else 0) + 160
    ox = margin + (plot if half else 0)
    oy = size - margin
    body = []

    def xy(radius, theta):
        return ox + scale * radius * math.cos(theta), oy - scale * radius * math.sin(theta)

    max_angle = math.pi if half else math.pi / 2
    # standard-deviation arcs
    step = 0.25 if rmax <= 2 else 0.5
    k = 1
    while k * step <= rmax + 1e-9:
        rad = k * step
        x0, y0 = xy(rad, 0.0)
        x1, y1 = xy(rad, max_angle)
        style = 'stroke="#444" stroke-width="1.2"' if abs(rad - 1.0) < 1e-9 else 'stroke="#bbb" stroke-dasharray="3,3"'
        large = 0
        body.append(f'<path d="M {_f(x0)} {_f(y0)} A {_f(scale * rad)} {_f(scale * rad)} 0 {large} 0 {_f(x1)} {_f(y1)}" fill="none" {style}/>')
        body.append(_text(x0, oy + 16, _f(rad), size=10))
        k += 1
    # correlation rays
    corr_ticks = [0.0, 0.2, 0.4, 0.6, 0.8, 0.9, 0.95, 0.99]
    if half:
        corr_ticks = sorted(set(corr_ticks + [-c for c in corr_ticks]))
    for c in corr_ticks:
        theta = math.acos(c)
        x1, y1 = xy(rmax, theta)
        body.append(f'<line x1="{_f(ox)}" y1="{_f(oy)}" x2="{_f(x1)}" y2="{_f(y1)}" stroke="#ddd"/>')
        lx, ly = xy(rmax * 1.06, theta)
        body.append(_text(lx, ly, f"{c:g}", size=10))
    tx, ty = xy(rmax * 1.16, math.pi / 4)
    body.append(_text(tx, ty, "Correlation", size=12, extra=f' transform="rotate(45 {_f(tx)} {_f(ty)})"'))
    body.append(_text(ox + scale * rmax / 2, oy + 36, "Normalised standard deviation", size=12))
    # centred RMS difference contours around the reference point
    clip = f'<clipPath id="quadrant"><path d="M {_f(ox)} {_f(oy)} L {_f(ox + scale * rmax)} {_f(oy)} A {_f(scale * rmax)} {_f(scale * rmax)} 0 0 0 {_f(xy(rmax, max_angle)[0])} {_f(xy(rmax, max_angle)[1])} Z"/></clipPath>'
    body.append(f"<defs>{clip}</defs>")
    refx, refy = xy(1.0, 0.0)
    for c in (0.25, 0.5, 0.75, 1.0, 1.25):
        body.append(f'<circle cx="{_f(refx)}" cy="{_f(refy)}" r="{_f(scale * c)}" fill="none" stroke="#9c9" stroke-dasharray="2,4" clip-path="url(#quadrant)"/>')
    body.append(f'<line x1="{_f(ox)}" y1="{_f(oy)}" x2="{_f(ox + scale * rmax)}" y2="{_f(oy)}" stroke="#000"/>')
    body.append(f'<line x1="{_f(ox)}" y1="{_f(oy)}" x2="{_f(ox)}" y2="{_f(oy - scale * rmax)}" stroke="#000"/>')
    if half:
        body.append(f'<line x1="{_f(ox)}" y1="{_f(oy)}" x2="{_f(ox - scale * rmax)}" y2="{_f(oy)}" stroke="#000"/>')
    body.append(
        f'<path class="reference" data-radius="1" data-angle="0" d="M {_f(refx - 7)} {_f(refy)} L {_f(refx + 7)} {_f(refy)} M {_f(refx)} {_f(refy - 7)} L {_f(refx)} {_f(refy + 7)}" stroke="#000" stroke-width="2"/>'
    )
    # series markers and legend
    lx0 = ox + scale * rmax + 40 if not half else size + plot + 20
    for i, s in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        kind = MARKERS[i % len(MARKERS)]
        for p in s["points"]:
            radius, theta = taylor_position(p["sigma_hat"], p["r"])
            x, y = xy(radius, theta)
            label = p.get("label", "")
            attrs = (
                f' class="marker" data-series={quoteattr(str(s["name"]))} data-label={quoteattr(str(label))}'
                f' data-radius="{radius!r}" data-angle="{theta!r}"'
            )
            body.append(_marker(kind, x, y, 5, color, attrs))
        ly = margin + 20 * i
        body.append(f'<g class="legend-entry" data-series={quoteattr(str(s["name"]))}>')
        body.append(_marker(kind, lx0, ly - 4, 5, color))
        body.append(_text(lx0 + 12, ly, s["name"], size=12, anchor="start"))
        body.append("</g>")
    body.append(_text(width / 2, 24, title, size=15))
    return _doc(int(width), size, body, title)


def taylor_series_from_doc(doc: dict) -> list:
    """Accept ``{"series": [...]}`` or a cross-validation metrics document."""
    try:
        if "series" in doc:
            series = []
            for s in doc["series"]:
                if "points" in s:
                    pts = [{"sigma_hat": float(p["sigma_hat"]), "r": float(p["r"]), "label": p.get("label", "")} for p in s["points"]]
                else:
                    pts = [{"sigma_hat": float(s["sigma_hat"]), "r": float(s["r"]), "label": s.get("name", "")}]
                series.append({"name": str(s["name"]), "points": pts})
            return series
        series = []
        for fold in doc["folds"]:
            pts = [
                {"sigma_hat": site["taylor"]["sigma_hat"], "r": site["taylor"]["r"], "label": site["site_id"]}
                for site in fold.get("per_site", [])
                if site.get("taylor")
            ]
            if fold.get("taylor"):
                pts.append({"sigma_hat": fold["taylor"]["sigma_hat"], "r": fold["taylor"]["r"], "label": "pooled"})
            series.append({"name": str(fold.get("name", fold["fold"])), "points": pts})
        return series
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInputError(f"not a Taylor input document: {exc}") from exc


def taylor_svg_from_metrics(doc: dict) -> str:
    return taylor_svg(taylor_series_from_doc(doc), title=f"Normalised Taylor diagram ({doc.get('mode', '')})".replace(" ()", ""))


# -- density scatter ----------------------------------------------------------


def _viridis(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * (len(_VIRIDIS) - 1)
    i = min(int(t), len(_VIRIDIS) - 2)
    f = t - i
    c = [round(a + (b - a) * f) for a, b in zip(_VIRIDIS[i], _VIRIDIS[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*c)


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def density_svg(x, y, nbins: int = 100, xlabel: str = "x", ylabel: str = "y", title: str = "Density scatter", size: int = 480) -> str:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    dens = density_bins(x, y, nbins)
    lo = float(min(x.min(), y.min()))
    hi = float(max(x.max(), y.max()))
    if hi <= lo:
        hi = lo + 1.0
    margin = 60
    plot = size - 2 * margin

    def px(v):
        return margin + (v - lo) / (hi - lo) * plot

    def py(v):
        return size - margin - (v - lo) / (hi - lo) * plot

    body = [f'<rect x="{margin}" y="{margin}" width="{plot}" height="{plot}" fill="none" stroke="#000"/>']
    for t in _ticks(lo, hi):
        body.append(_text(px(t), size - margin + 16, f"{t:g}", size=10))
        body.append(_text(margin - 6, py(t) + 4, f"{t:g}", size=10, anchor="end"))
    body.append(f'<line x1="{_f(px(lo))}" y1="{_f(py(lo))}" x2="{_f(px(hi))}" y2="{_f(py(hi))}" stroke="#888" stroke-dasharray="4,3"/>')
    order = np.argsort(dens, kind="stable")
    for i in order:
        body.append(
            f'<circle class="point" cx="{_f(px(x[i]))}" cy="{_f(py(y[i]))}" r="2" fill="{_viridis(dens[i])}" data-density="{float(dens[i])!r}"/>'
        )
    body.append(_text(size / 2, size - 20, xlabel))
    body.append(_text(18, size / 2, ylabel, extra=f' transform="rotate(-90 18 {_f(size / 2)})"'))
    body.append(_text(size / 2, 30, title, size=15))
    return _doc(size, size, body, title)


def density_xy_from_doc(doc: dict):
    try:
        if "pairs" in doc:
            return doc["pairs"]["obs"], doc["pairs"]["pred"]
        if "obs" in doc and "pred" in doc:
            return doc["obs"], doc["pred"]
        return doc["x"], doc["y"]
    except (KeyError, TypeError) as exc:
        raise MalformedInputError(f"not a density input document: {exc}") from exc


# -- SHAP violins -------------------------------------------------------------


def _kde(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    n = values.size
    sd = float(np.std(values, ddof=1)) if n > 1 else 0.0
    iqr = float(np.subtract(*np.percentile(values, [75, 25]))) if n > 1 else 0.0
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    bw = 0.9 * spread * n ** (-0.2) if spread > 0 else 1e-3 * max(1.0, abs(float(values.mean())))
    z = (grid[:, None] - values[None, :]) / bw
    return np.exp(-0.5 * z * z).sum(axis=1) / (n * bw * math.sqrt(2 * math.pi))


def violin_svg(summary: dict, top: int = 6, title: str = "SHAP values", width: int = 560) -> str:
    """Horizontal violins of per-feature attributions, ranked as in ``summary``."""
    try:
        entries = sorted(summary["ranking"], key=lambda e: e.get("rank", 0))[:top]
        data = [(str(e["feature"]), np.asarray(e["phi"], dtype=np.float64)) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedInputError(f"not a SHAP summary document: {exc}") from exc
    row_h = 56
    margin_l, margin_r, margin_t = 120, 30, 50
    height = margin_t + row_h * max(len(data), 1) + 50
    all_vals = np.concatenate([v for _, v in data]) if data else np.zeros(1)
    lo, hi = float(all_vals.min()), float(all_vals.max())
    if hi <= lo:
        lo, hi = lo - 1.0, hi + 1.0
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    plot_w = width - margin_l - margin_r

    def px(v):
        return margin_l + (v - lo) / (hi - lo) * plot_w

    body = []
    body.append(f'<line x1="{_f(px(0.0))}" y1="{margin_t - 10}" x2="{_f(px(0.0))}" y2="{height - 40}" stroke="#888" stroke-dasharray="3,3"/>')
    for i, (name, vals) in enumerate(data):
        cy = margin_t + row_h * i + row_h / 2
        grid = np.linspace(vals.min(), vals.max(), 64) if vals.max() > vals.min() else np.array([vals.min()])
        if grid.size > 1:
            dens = _kde(vals, grid)
            dens = dens / dens.max() * (row_h * 0.42)
            top_pts = [f"{_f(px(g))},{_f(cy - d)}" for g, d in zip(grid, dens)]
            bot_pts = [f"{_f(px(g))},{_f(cy + d)}" for g, d in zip(grid[::-1], dens[::-1])]
            shape = f'<polygon points="{" ".join(top_pts + bot_pts)}" fill="{PALETTE[i % len(PALETTE)]}" fill-opacity="0.6" stroke="#333"/>'
        else:
            shape = f'<line x1="{_f(px(grid[0]))}" y1="{_f(cy - 10)}" x2="{_f(px(grid[0]))}" y2="{_f(cy + 10)}" stroke="#333" stroke-width="2"/>'
        body.append(f'<g class="violin" data-feature={quoteattr(name)} data-rank="{i + 1}">{shape}</g>')
        med = float(np.median(vals))
        body.append(f'<circle cx="{_f(px(med))}" cy="{_f(cy)}" r="3" fill="white" stroke="#000"/>')
        body.append(_text(margin_l - 8, cy + 4, name, anchor="end"))
    for t in _ticks(lo, hi):
        body.append(_text(px(t), height - 22, f"{t:g}", size=10))
    body.append(_text(margin_l + plot_w / 2, height - 6, "SHAP value", size=12))
    body.append(_text(width / 2, 28, title, size=15))
    return _doc(width, int(height), body, title)
