"""Standalone SVG line charts, no plotting stack required."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b")

_WIDTH, _HEIGHT = 720, 420
_LEFT, _RIGHT, _TOP, _BOTTOM = 64, 24, 40, 48


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def write_line_chart(path: str | Path, title: str,
                     series: Sequence[tuple[str, Sequence[float]]],
                     x_label: str = "", y_label: str = "") -> None:
    """Chart several equal-length series against their index."""
    if not series or any(len(v) == 0 for _, v in series):
        raise ValueError("chart needs at least one non-empty series")
    n = max(len(v) for _, v in series)
    lo = min(min(v) for _, v in series)
    hi = max(max(v) for _, v in series)
    if hi == lo:
        hi, lo = hi + 0.5, lo - 0.5
    pad = 0.05 * (hi - lo)
    lo, hi = lo - pad, hi + pad
    plot_w = _WIDTH - _LEFT - _RIGHT
    plot_h = _HEIGHT - _TOP - _BOTTOM

    def px(i: float) -> float:
        return _LEFT + (plot_w * i / max(n - 1, 1))

    def py(v: float) -> float:
        return _TOP + plot_h * (1.0 - (v - lo) / (hi - lo))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_WIDTH}" height="{_HEIGHT}" '
        f'viewBox="0 0 {_WIDTH} {_HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{_WIDTH}" height="{_HEIGHT}" fill="white"/>',
        f'<text x="{_WIDTH / 2}" y="22" text-anchor="middle" font-size="15">{title}</text>',
    ]
    for k in range(5):
        v = lo + (hi - lo) * k / 4
        y = py(v)
        parts.append(f'<line x1="{_LEFT}" y1="{_fmt(y)}" x2="{_WIDTH - _RIGHT}" '
                     f'y2="{_fmt(y)}" stroke="#ddd"/>')
        parts.append(f'<text x="{_LEFT - 6}" y="{_fmt(y + 4)}" text-anchor="end">{_fmt(v)}</text>')
    ticks = min(n, 9)
    for k in range(ticks):
        i = round(k * (n - 1) / max(ticks - 1, 1))
        x = px(i)
        parts.append(f'<line x1="{_fmt(x)}" y1="{_TOP + plot_h}" x2="{_fmt(x)}" '
                     f'y2="{_TOP + plot_h + 4}" stroke="#666"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{_TOP + plot_h + 18}" text-anchor="middle">{i}</text>')
    parts.append(f'<rect x="{_LEFT}" y="{_TOP}" width="{plot_w}" height="{plot_h}" '
                 f'fill="none" stroke="#666"/>')
    for idx, (name, values) in enumerate(series):
        color = PALETTE[idx % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(i))},{_fmt(py(v))}" for i, v in enumerate(values))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        ly = _TOP + 14 + 16 * idx
        parts.append(f'<line x1="{_WIDTH - _RIGHT - 120}" y1="{ly - 4}" '
                     f'x2="{_WIDTH - _RIGHT - 100}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{_WIDTH - _RIGHT - 94}" y="{ly}">{name}</text>')
    if x_label:
        parts.append(f'<text x="{_WIDTH / 2}" y="{_HEIGHT - 12}" text-anchor="middle">{x_label}</text>')
    if y_label:
        parts.append(f'<text x="16" y="{_TOP + plot_h / 2}" text-anchor="middle" '
                     f'transform="rotate(-90 16 {_TOP + plot_h / 2})">{y_label}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
