"""Plot emission: deterministic SVG plus matplotlib report figures.

The SVG writer is deliberately dependency-free and byte-stable: fixed
canvas, fixed formatting, no timestamps, data order preserved. Report
paths additionally render matplotlib PNG figures next to the delimited
output; those use the Agg backend with metadata stripped so repeat runs
produce identical bytes.
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import DomainError, ParameterError

__all__ = ["emit_plot", "render_figure"]

_WIDTH, _HEIGHT = 640.0, 480.0
_MARGIN_L, _MARGIN_R, _MARGIN_T, _MARGIN_B = 70.0, 20.0, 30.0, 50.0
_PALETTE = ("#1f6fb2", "#d1495b", "#2e8b57", "#8c5aa8", "#c98a00", "#4a4a4a")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _nice_ticks(lo: float, hi: float, count: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    span = hi - lo
    step = 10.0 ** math.floor(math.log10(span / count))
    for mult in (1.0, 2.0, 5.0, 10.0):
        if span / (step * mult) <= count:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12 * span:
        ticks.append(round(t, 12))
        t += step
    return ticks


def emit_plot(series, scale: str, path, xlabel: str = "x", ylabel: str = "y") -> None:
    """Write a deterministic SVG scatter+line plot.

    ``series`` is a list of (x_values, y_values, label). Every series is
    drawn as one polyline through its points plus one circle per point.
    ``scale`` is 'linear' or 'loglog'; log axes demand positive data.
    Identical inputs produce identical bytes.
    """
    if scale not in ("linear", "loglog"):
        raise ParameterError("scale must be 'linear' or 'loglog'")
    cleaned = []
    for xs, ys, label in series:
        xs = np.asarray(xs, dtype=float).ravel()
        ys = np.asarray(ys, dtype=float).ravel()
        if xs.size != ys.size or xs.size == 0:
            raise ParameterError("series must be nonempty with matching lengths")
        if scale == "loglog" and (np.any(xs <= 0) or np.any(ys <= 0)):
            raise DomainError("log-log plots need strictly positive data")
        cleaned.append((xs, ys, str(label)))

    def tx(v):
        return math.log10(v) if scale == "loglog" else v

    all_x = np.concatenate([c[0] for c in cleaned])
    all_y = np.concatenate([c[1] for c in cleaned])
    x_lo, x_hi = tx(all_x.min()), tx(all_x.max())
    y_lo, y_hi = tx(all_y.min()), tx(all_y.max())
    if x_hi == x_lo:
        x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
    if y_hi == y_lo:
        y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
    pad_x = 0.05 * (x_hi - x_lo)
    pad_y = 0.05 * (y_hi - y_lo)
    x_lo, x_hi = x_lo - pad_x, x_hi + pad_x
    y_lo, y_hi = y_lo - pad_y, y_hi + pad_y

    plot_w = _WIDTH - _MARGIN_L - _MARGIN_R
    plot_h = _HEIGHT - _MARGIN_T - _MARGIN_B

    def px(v):
        return _MARGIN_L + (tx(v) - x_lo) / (x_hi - x_lo) * plot_w

    def py(v):
        return _HEIGHT - _MARGIN_B - (tx(v) - y_lo) / (y_hi - y_lo) * plot_h

    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{int(_WIDTH)}" height="{int(_HEIGHT)}" '
        f'viewBox="0 0 {int(_WIDTH)} {int(_HEIGHT)}">',
        f'<rect x="0" y="0" width="{int(_WIDTH)}" height="{int(_HEIGHT)}" fill="#ffffff"/>',
        f'<rect x="{_fmt(_MARGIN_L)}" y="{_fmt(_MARGIN_T)}" width="{_fmt(plot_w)}" '
        f'height="{_fmt(plot_h)}" fill="none" stroke="#333333" stroke-width="1"/>',
    ]
    for t in _nice_ticks(x_lo, x_hi):
        x = _MARGIN_L + (t - x_lo) / (x_hi - x_lo) * plot_w
        label = f"1e{t:g}" if scale == "loglog" else f"{t:g}"
        lines.append(
            f'<line x1="{_fmt(x)}" y1="{_fmt(_HEIGHT - _MARGIN_B)}" x2="{_fmt(x)}" '
            f'y2="{_fmt(_HEIGHT - _MARGIN_B + 5)}" stroke="#333333" stroke-width="1"/>'
        )
        lines.append(
            f'<text x="{_fmt(x)}" y="{_fmt(_HEIGHT - _MARGIN_B + 18)}" font-size="11" '
            f'text-anchor="middle" font-family="monospace">{label}</text>'
        )
    for t in _nice_ticks(y_lo, y_hi):
        y = _HEIGHT - _MARGIN_B - (t - y_lo) / (y_hi - y_lo) * plot_h
        label = f"1e{t:g}" if scale == "loglog" else f"{t:g}"
        lines.append(
            f'<line x1="{_fmt(_MARGIN_L - 5)}" y1="{_fmt(y)}" x2="{_fmt(_MARGIN_L)}" '
            f'y2="{_fmt(y)}" stroke="#333333" stroke-width="1"/>'
        )
        lines.append(
            f'<text x="{_fmt(_MARGIN_L - 8)}" y="{_fmt(y + 4)}" font-size="11" '
            f'text-anchor="end" font-family="monospace">{label}</text>'
        )
    lines.append(
        f'<text x="{_fmt(_MARGIN_L + plot_w / 2)}" y="{_fmt(_HEIGHT - 10)}" font-size="13" '
        f'text-anchor="middle" font-family="monospace">{xlabel}</text>'
    )
    lines.append(
        f'<text x="15" y="{_fmt(_MARGIN_T + plot_h / 2)}" font-size="13" text-anchor="middle" '
        f'font-family="monospace" transform="rotate(-90 15 {_fmt(_MARGIN_T + plot_h / 2)})">{ylabel}</text>'
    )
    for si, (xs, ys, label) in enumerate(cleaned):
        color = _PALETTE[si % len(_PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(y))}" for x, y in zip(xs, ys))
        lines.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        for x, y in zip(xs, ys):
            lines.append(
                f'<circle cx="{_fmt(px(x))}" cy="{_fmt(py(y))}" r="3" fill="{color}"/>'
            )
        lines.append(
            f'<text x="{_fmt(_WIDTH - _MARGIN_R - 5)}" y="{_fmt(_MARGIN_T + 15 + 14 * si)}" '
            f'font-size="12" text-anchor="end" fill="{color}" font-family="monospace">{label}</text>'
        )
    lines.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def render_figure(
    series,
    path,
    title: str = "",
    xlabel: str = "x",
    ylabel: str = "y",
    loglog: bool = False,
) -> None:
    """Matplotlib PNG companion figure for report directories."""
    fig, ax = plt.subplots(figsize=(6.4, 4.8), dpi=110)
    for si, (xs, ys, label) in enumerate(series):
        color = _PALETTE[si % len(_PALETTE)]
        ax.plot(xs, ys, marker="o", markersize=3.5, linewidth=1.3, color=color, label=str(label))
    if loglog:
        ax.set_xscale("log")
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    ax.grid(True, which="both", alpha=0.25)
    if any(lbl for _, _, lbl in series):
        ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
