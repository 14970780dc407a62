"""Dependency-free SVG line charts (text output, well-formed XML)."""

from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#e377c2", "#17becf", "#bcbd22", "#7f7f7f"]

WIDTH, HEIGHT = 720, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 170, 40, 50


def _ticks(lo, hi, n=5):
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    return [lo + span * i / (n - 1) for i in range(n)]


def line_chart(series, title="", x_label="", y_label=""):
    """Render labelled (x, y) series to an SVG string.

    series: list of (label, points) with points a list of (x, y).
    """
    pts = [p for _, ps in series for p in ps]
    if not pts:
        xs_lo, xs_hi, ys_lo, ys_hi = 0.0, 1.0, 0.0, 1.0
    else:
        xs_lo = min(p[0] for p in pts)
        xs_hi = max(p[0] for p in pts)
        ys_lo = min(p[1] for p in pts)
        ys_hi = max(p[1] for p in pts)
    if xs_hi == xs_lo:
        xs_hi = xs_lo + 1.0
    if ys_hi == ys_lo:
        ys_hi = ys_lo + 1.0
    plot_w = WIDTH - MARGIN_L - MARGIN_R
    plot_h = HEIGHT - MARGIN_T - MARGIN_B

    def sx(x):
        return MARGIN_L + (x - xs_lo) / (xs_hi - xs_lo) * plot_w

    def sy(y):
        return MARGIN_T + plot_h - (y - ys_lo) / (ys_hi - ys_lo) * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
        f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2:.1f}" y="24" text-anchor="middle" '
        f'font-family="sans-serif" font-size="16">{escape(title)}</text>',
    ]
    for tx in _ticks(xs_lo, xs_hi):
        x = sx(tx)
        parts.append(f'<line x1="{x:.1f}" y1="{MARGIN_T}" x2="{x:.1f}" '
                     f'y2="{MARGIN_T + plot_h}" stroke="#dddddd"/>')
        parts.append(f'<text x="{x:.1f}" y="{MARGIN_T + plot_h + 18}" '
                     f'text-anchor="middle" font-family="sans-serif" '
                     f'font-size="11">{tx:.4g}</text>')
    for ty in _ticks(ys_lo, ys_hi):
        y = sy(ty)
        parts.append(f'<line x1="{MARGIN_L}" y1="{y:.1f}" '
                     f'x2="{MARGIN_L + plot_w}" y2="{y:.1f}" stroke="#dddddd"/>')
        parts.append(f'<text x="{MARGIN_L - 8}" y="{y + 4:.1f}" '
                     f'text-anchor="end" font-family="sans-serif" '
                     f'font-size="11">{ty:.4g}</text>')
    parts.append(f'<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{plot_w}" '
                 f'height="{plot_h}" fill="none" stroke="#333333"/>')
    parts.append(f'<text x="{MARGIN_L + plot_w / 2:.1f}" y="{HEIGHT - 12}" '
                 f'text-anchor="middle" font-family="sans-serif" '
                 f'font-size="13">{escape(x_label)}</text>')
    parts.append(f'<text x="20" y="{MARGIN_T + plot_h / 2:.1f}" '
                 f'text-anchor="middle" font-family="sans-serif" font-size="13" '
                 f'transform="rotate(-90 20 {MARGIN_T + plot_h / 2:.1f})">'
                 f'{escape(y_label)}</text>')
    for i, (label, points) in enumerate(series):
        color = PALETTE[i % len(PALETTE)]
        if points:
            coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in points)
            parts.append(f'<polyline points="{coords}" fill="none" '
                         f'stroke="{color}" stroke-width="1.8"/>')
        ly = MARGIN_T + 16 + 16 * i
        parts.append(f'<line x1="{MARGIN_L + plot_w + 10}" y1="{ly - 4}" '
                     f'x2="{MARGIN_L + plot_w + 30}" y2="{ly - 4}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{MARGIN_L + plot_w + 36}" y="{ly}" '
                     f'font-family="sans-serif" font-size="11">'
                     f'{escape(str(label))}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_line_chart(path, series, title="", x_label="", y_label=""):
    with open(path, "w", encoding="utf-8") as f:
        f.write(line_chart(series, title=title, x_label=x_label, y_label=y_label))
