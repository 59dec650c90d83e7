"""Self-contained SVG rendering of FROC curves (no plotting dependency).

Output is byte-stable for identical inputs: fixed canvas, fixed palette,
and fixed-precision coordinate formatting.
"""

from __future__ import annotations

import numpy as np

from .evaluation import FrocCurve

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 30, 30, 60
FPR_RANGE = (0.0, 2.0)
SE_RANGE = (0.0, 1.0)
PALETTE = ("#c0392b", "#2980b9", "#27ae60", "#8e44ad", "#d35400", "#16a085")


def _x(fpr: float) -> float:
    lo, hi = FPR_RANGE
    frac = (fpr - lo) / (hi - lo)
    return MARGIN_L + frac * (WIDTH - MARGIN_L - MARGIN_R)

def _y(se: float) -> float:
    lo, hi = SE_RANGE
    frac = (se - lo) / (hi - lo)
    return HEIGHT - MARGIN_B - frac * (HEIGHT - MARGIN_T - MARGIN_B)


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _curve_points(curve: FrocCurve) -> list[tuple[float, float]]:
    order = np.argsort(curve.fpr, kind="stable")
    fpr = curve.fpr[order]
    se = curve.se[order]
    pts = [(float(f), float(s)) for f, s in zip(fpr, se) if f <= FPR_RANGE[1]]
    if not pts:
        return []
    # Extend the last visible operating point to the right edge.
    pts.append((FPR_RANGE[1], pts[-1][1]))
    return pts


def render_froc_svg(curves: dict[str, FrocCurve]) -> str:
    """Render one or more labelled FROC curves to an SVG string."""
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="13">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    # Axes, ticks, gridlines.
    x0, y0 = _x(FPR_RANGE[0]), _y(SE_RANGE[0])
    x1, y1 = _x(FPR_RANGE[1]), _y(SE_RANGE[1])
    for fpr in np.arange(0.0, 2.01, 0.5):
        x = _x(float(fpr))
        parts.append(
            f'<line x1="{_fmt(x)}" y1="{_fmt(y0)}" x2="{_fmt(x)}" y2="{_fmt(y1)}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y0 + 20)}" text-anchor="middle">{fpr:g}</text>'
        )
    for se in np.arange(0.0, 1.01, 0.2):
        y = _y(float(se))
        parts.append(
            f'<line x1="{_fmt(x0)}" y1="{_fmt(y)}" x2="{_fmt(x1)}" y2="{_fmt(y)}" '
            f'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{_fmt(x0 - 8)}" y="{_fmt(y + 4)}" text-anchor="end">{se:.1f}</text>'
        )
    parts.append(
        f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x1)}" y2="{_fmt(y0)}" '
        f'stroke="black" stroke-width="1.5"/>'
    )
    parts.append(
        f'<line x1="{_fmt(x0)}" y1="{_fmt(y0)}" x2="{_fmt(x0)}" y2="{_fmt(y1)}" '
        f'stroke="black" stroke-width="1.5"/>'
    )
    parts.append(
        f'<text x="{_fmt((x0 + x1) / 2)}" y="{HEIGHT - 15}" text-anchor="middle">'
        f"False positives per scan</text>"
    )
    parts.append(
        f'<text x="18" y="{_fmt((y0 + y1) / 2)}" text-anchor="middle" '
        f'transform="rotate(-90 18 {_fmt((y0 + y1) / 2)})">Lesion sensitivity</text>'
    )

    for k, (label, curve) in enumerate(sorted(curves.items())):
        color = PALETTE[k % len(PALETTE)]
        pts = _curve_points(curve)
        if pts:
            coords = " ".join(f"{_fmt(_x(f))},{_fmt(_y(s))}" for f, s in pts)
            parts.append(
                f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>'
            )
            for f, s in pts[:-1]:
                parts.append(
                    f'<circle cx="{_fmt(_x(f))}" cy="{_fmt(_y(s))}" r="3" fill="{color}"/>'
                )
        ly = MARGIN_T + 18 * k + 10
        parts.append(
            f'<line x1="{_fmt(x1 - 150)}" y1="{_fmt(ly - 4)}" x2="{_fmt(x1 - 120)}" '
            f'y2="{_fmt(ly - 4)}" stroke="{color}" stroke-width="2"/>'
        )
        parts.append(f'<text x="{_fmt(x1 - 112)}" y="{_fmt(ly)}">{label}</text>')

    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def svg_point(fpr: float, se: float) -> tuple[float, float]:
    """Pixel coordinates of a data point; exposed so tests can locate curve
    features inside the rendered SVG."""
    return _x(fpr), _y(se)
