"""Hand-emitted SVG line charts; no plotting dependency, stable bytes.

All coordinates are formatted to two decimals and tick labels with %.6g,
so rendering the same data twice yields identical documents.  A document
is a fixed 800x500 viewport containing one or more horizontal panels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

PALETTE = [
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#ff7f0e",
    "#9467bd",
    "#8c564b",
    "#17becf",
    "#7f7f7f",
]

_N_TICKS = 10


@dataclass
class Series:
    label: str
    xs: list
    ys: list

    def __post_init__(self):
        if len(self.xs) != len(self.ys):
            raise ValueError("xs and ys must have equal length")


@dataclass
class Chart:
    title: str
    x_label: str
    y_label: str
    series: list[Series] = field(default_factory=list)
    hlines: list[tuple[str, float]] = field(default_factory=list)


def _escape(text: str) -> str:
    return (
        text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")
    )


def _data_range(values: list[float]) -> tuple[float, float]:
    if not values:
        return 0.0, 1.0
    lo, hi = min(values), max(values)
    if lo == hi:
        pad = abs(lo) * 0.1 or 0.5
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _render_panel(out: list[str], chart: Chart, x0: float, y0: float, w: float, h: float) -> None:
    left, right, top, bottom = 62.0, 12.0, 28.0, 42.0
    px, py = x0 + left, y0 + top
    pw, ph = w - left - right, h - top - bottom

    xs = [float(x) for s in chart.series for x in s.xs]
    ys = [float(y) for s in chart.series for y in s.ys]
    ys.extend(float(v) for _, v in chart.hlines)
    x_min, x_max = _data_range(xs)
    y_min, y_max = _data_range(ys)

    def sx(x: float) -> float:
        return px + (x - x_min) / (x_max - x_min) * pw

    def sy(y: float) -> float:
        return py + ph - (y - y_min) / (y_max - y_min) * ph

    out.append(f'<text x="{x0 + w / 2:.2f}" y="{y0 + 16:.2f}" text-anchor="middle" font-size="13" font-family="monospace">{_escape(chart.title)}</text>')

    for i in range(_N_TICKS):
        ty = y_min + (y_max - y_min) * i / (_N_TICKS - 1)
        yy = sy(ty)
        out.append(f'<line x1="{px:.2f}" y1="{yy:.2f}" x2="{px + pw:.2f}" y2="{yy:.2f}" stroke="#e0e0e0" stroke-width="1"/>')
        out.append(f'<text x="{px - 5:.2f}" y="{yy + 3:.2f}" text-anchor="end" font-size="9" font-family="monospace">{ty:.6g}</text>')
        tx = x_min + (x_max - x_min) * i / (_N_TICKS - 1)
        xx = sx(tx)
        out.append(f'<line x1="{xx:.2f}" y1="{py + ph:.2f}" x2="{xx:.2f}" y2="{py + ph + 4:.2f}" stroke="#000000" stroke-width="1"/>')
        out.append(f'<text x="{xx:.2f}" y="{py + ph + 14:.2f}" text-anchor="middle" font-size="9" font-family="monospace">{tx:.6g}</text>')

    out.append(f'<line x1="{px:.2f}" y1="{py + ph:.2f}" x2="{px + pw:.2f}" y2="{py + ph:.2f}" stroke="#000000" stroke-width="1.5"/>')
    out.append(f'<line x1="{px:.2f}" y1="{py:.2f}" x2="{px:.2f}" y2="{py + ph:.2f}" stroke="#000000" stroke-width="1.5"/>')
    out.append(f'<text x="{px + pw / 2:.2f}" y="{y0 + h - 8:.2f}" text-anchor="middle" font-size="11" font-family="monospace">{_escape(chart.x_label)}</text>')
    out.append(f'<text x="{x0 + 14:.2f}" y="{py + ph / 2:.2f}" text-anchor="middle" font-size="11" font-family="monospace" transform="rotate(-90 {x0 + 14:.2f} {py + ph / 2:.2f})">{_escape(chart.y_label)}</text>')

    for i, (label, value) in enumerate(chart.hlines):
        yy = sy(float(value))
        out.append(f'<line x1="{px:.2f}" y1="{yy:.2f}" x2="{px + pw:.2f}" y2="{yy:.2f}" stroke="#444444" stroke-width="1" stroke-dasharray="5,3"/>')
        out.append(f'<text x="{px + pw - 4:.2f}" y="{yy - 3:.2f}" text-anchor="end" font-size="9" font-family="monospace">{_escape(label)}</text>')

    if not xs:
        out.append(f'<text x="{px + pw / 2:.2f}" y="{py + ph / 2:.2f}" text-anchor="middle" font-size="14" font-family="monospace" fill="#888888">no data</text>')

    legend_y = py + 12
    for i, series in enumerate(chart.series):
        color = PALETTE[i % len(PALETTE)]
        if series.xs:
            points = " ".join(f"{sx(float(x)):.2f},{sy(float(y)):.2f}" for x, y in zip(series.xs, series.ys))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.8" points="{points}"/>')
        out.append(f'<line x1="{px + 8:.2f}" y1="{legend_y:.2f}" x2="{px + 26:.2f}" y2="{legend_y:.2f}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{px + 30:.2f}" y="{legend_y + 3:.2f}" text-anchor="start" font-size="9" font-family="monospace">{_escape(series.label)}</text>')
        legend_y += 12


def render_svg(charts: list[Chart], width: int = 800, height: int = 500) -> str:
    """One fixed-size SVG document with the charts laid out horizontally."""
    if not charts:
        raise ValueError("need at least one chart")
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        '<rect x="0" y="0" width="100%" height="100%" fill="#ffffff"/>',
    ]
    panel_w = width / len(charts)
    for i, chart in enumerate(charts):
        _render_panel(out, chart, i * panel_w, 0.0, panel_w, float(height))
    out.append("</svg>")
    return "\n".join(out) + "\n"
