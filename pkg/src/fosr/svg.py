"""Minimal deterministic SVG line charts (no plotting dependency).

Byte output depends only on the data handed in: coordinates are rounded
to fixed precision and series are drawn in the order given.
"""

from __future__ import annotations

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 62, 20, 28, 46


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def line_chart(series: list[tuple[str, list[float], list[float]]],
               title: str, x_label: str, y_label: str,
               y_range: tuple[float, float] | None = None,
               h_line: float | None = None) -> str:
    """Render named (x, y) series as one SVG document string."""
    xs = [x for _, sx, _ in series for x in sx]
    ys = [y for _, _, sy in series for y in sy]
    x_lo, x_hi = (min(xs), max(xs)) if xs else (0.0, 1.0)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = y_range if y_range else (0.0, max(1.0, max(ys) if ys else 1.0))

    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def px(x: float) -> float:
        return MARGIN_L + (x - x_lo) / (x_hi - x_lo) * plot_w

    def py(y: float) -> float:
        return MARGIN_T + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.0f}" y="18" text-anchor="middle" '
        f'font-family="sans-serif" font-size="14">{title}</text>',
    ]
    axis = (f'<line x1="{MARGIN_L}" y1="{MARGIN_T}" x2="{MARGIN_L}" '
            f'y2="{MARGIN_T + plot_h}" stroke="black"/>'
            f'<line x1="{MARGIN_L}" y1="{MARGIN_T + plot_h}" '
            f'x2="{MARGIN_L + plot_w}" y2="{MARGIN_T + plot_h}" stroke="black"/>')
    parts.append(axis)
    for tx in _ticks(x_lo, x_hi):
        parts.append(
            f'<line x1="{_fmt(px(tx))}" y1="{MARGIN_T + plot_h}" '
            f'x2="{_fmt(px(tx))}" y2="{MARGIN_T + plot_h + 5}" stroke="black"/>'
            f'<text x="{_fmt(px(tx))}" y="{MARGIN_T + plot_h + 18}" '
            f'text-anchor="middle" font-family="sans-serif" font-size="11">'
            f'{tx:.3g}</text>'
        )
    for ty in _ticks(y_lo, y_hi):
        parts.append(
            f'<line x1="{MARGIN_L - 5}" y1="{_fmt(py(ty))}" x2="{MARGIN_L}" '
            f'y2="{_fmt(py(ty))}" stroke="black"/>'
            f'<text x="{MARGIN_L - 8}" y="{_fmt(py(ty) + 4)}" '
            f'text-anchor="end" font-family="sans-serif" font-size="11">'
            f'{ty:.3g}</text>'
        )
    parts.append(
        f'<text x="{MARGIN_L + plot_w / 2:.0f}" y="{HEIGHT - 8}" '
        f'text-anchor="middle" font-family="sans-serif" font-size="12">'
        f'{x_label}</text>'
        f'<text x="16" y="{MARGIN_T + plot_h / 2:.0f}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="12" '
        f'transform="rotate(-90 16 {MARGIN_T + plot_h / 2:.0f})">{y_label}</text>'
    )
    if h_line is not None and y_lo <= h_line <= y_hi:
        parts.append(
            f'<line x1="{MARGIN_L}" y1="{_fmt(py(h_line))}" '
            f'x2="{MARGIN_L + plot_w}" y2="{_fmt(py(h_line))}" '
            f'stroke="#888888" stroke-dasharray="4,3"/>'
        )
    for idx, (name, sx, sy) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(sx, sy))
        if len(sx) > 1:
            parts.append(f'<polyline points="{pts}" fill="none" '
                         f'stroke="{color}" stroke-width="1.5"/>')
        for x, y in zip(sx, sy):
            parts.append(f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" '
                         f'r="3" fill="{color}"/>')
        ly = MARGIN_T + 14 + 16 * idx
        parts.append(
            f'<line x1="{MARGIN_L + plot_w - 110}" y1="{ly - 4}" '
            f'x2="{MARGIN_L + plot_w - 88}" y2="{ly - 4}" stroke="{color}" '
            f'stroke-width="1.5"/>'
            f'<text x="{MARGIN_L + plot_w - 82}" y="{ly}" '
            f'font-family="sans-serif" font-size="11">{name}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
