"""Plain SVG overlays of trial centerlines and error curves; no plotting library needed."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

PANEL_W = 320
PANEL_H = 220
MARGIN = 30
COLORS = {"init": "#888888", "target": "#1a7f37", "final": "#cf222e", "e_mean": "#0550ae",
          "e_max": "#bc4c00"}


def _fmt(v: float) -> str:
    s = f"{v:.2f}"
    return "0.00" if s == "-0.00" else s


class _Frame:
    """Maps data coordinates into a panel box, y up."""

    def __init__(self, x0, y0, w, h, xlim, ylim):
        self.x0, self.y0, self.w, self.h = x0, y0, w, h
        self.xlim = xlim
        self.ylim = ylim

    def map(self, pts):
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        (xa, xb), (ya, yb) = self.xlim, self.ylim
        sx = self.w / (xb - xa) if xb > xa else 1.0
        sy = self.h / (yb - ya) if yb > ya else 1.0
        u = self.x0 + (pts[:, 0] - xa) * sx
        v = self.y0 + self.h - (pts[:, 1] - ya) * sy
        return " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(u, v))

    def axes(self, label=""):
        x0, y0, w, h = self.x0, self.y0, self.w, self.h
        out = [f'<rect x="{_fmt(x0)}" y="{_fmt(y0)}" width="{_fmt(w)}" height="{_fmt(h)}" '
               f'fill="none" stroke="#000000" stroke-width="0.8"/>']
        if label:
            out.append(f'<text x="{_fmt(x0)}" y="{_fmt(y0 - 6)}" font-size="10" '
                       f'font-family="sans-serif">{escape(label)}</text>')
        return out


def _limits(arrays, pad=0.05):
    pts = np.concatenate([np.asarray(a, dtype=np.float64).reshape(-1, 2) for a in arrays])
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    mid = (lo + hi) / 2
    half = span * (0.5 + pad)
    return (mid[0] - half, mid[0] + half), (mid[1] - half, mid[1] + half)


def _shape_panel(trial, x0, y0):
    curves = {"init": trial.init_centerline, "target": trial.target_centerline, "final": trial.final_centerline}
    xlim, ylim = _limits(list(curves.values()))
    frame = _Frame(x0, y0, PANEL_W, PANEL_H, xlim, ylim)
    label = f"trial {trial.trial_id} {trial.mode} init {trial.init_id} target {trial.target_id}"
    out = frame.axes(label)
    for name, pts in curves.items():
        dash = ' stroke-dasharray="4,2"' if name == "target" else ""
        out.append(f'<polyline class="{name}" points="{frame.map(pts)}" fill="none" '
                   f'stroke="{COLORS[name]}" stroke-width="1.5"{dash}/>')
    return out


def _error_panel(trial, x0, y0):
    t = np.asarray(trial.times, dtype=np.float64)
    top = float(max(np.max(trial.e_max), 1e-9)) if len(t) else 1.0
    frame = _Frame(x0, y0, PANEL_W, PANEL_H, (0.0, float(t[-1]) if len(t) and t[-1] > 0 else 1.0),
                   (0.0, top * 1.05))
    out = frame.axes(f"error [mm] vs time [s], final e_mean {trial.final_e_mean:.3f}")
    for name in ("e_mean", "e_max"):
        series = np.column_stack([t, getattr(trial, name)])
        pts = frame.map(series).split(" ")
        d = "M" + " L".join(pts) if pts and pts[0] else ""
        out.append(f'<path class="{name}" d="{d}" fill="none" stroke="{COLORS[name]}" stroke-width="1.2"/>')
    return out


def render_svg(trials, title: str = "") -> str:
    """One row per trial: centerline overlay on the left, error curves on the right.

    An empty list gives a single empty pair of axes.
    """
    trials = list(trials)
    rows = max(len(trials), 1)
    width = 2 * PANEL_W + 3 * MARGIN
    height = rows * (PANEL_H + MARGIN) + 2 * MARGIN
    body = []
    if title:
        body.append(f'<text x="{MARGIN}" y="{MARGIN - 10}" font-size="12" '
                    f'font-family="sans-serif">{escape(title)}</text>')
    if not trials:
        body += _Frame(MARGIN, MARGIN, PANEL_W, PANEL_H, (0, 1), (0, 1)).axes("no trials")
    for k, trial in enumerate(trials):
        y0 = MARGIN + k * (PANEL_H + MARGIN)
        body.append(f'<g class="trial" id="trial{trial.trial_id}">')
        body += _shape_panel(trial, MARGIN, y0)
        body += _error_panel(trial, 2 * MARGIN + PANEL_W, y0)
        body.append("</g>")
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="#ffffff"/>', *body, "</svg>"]) + "\n"


def write_svg(path, trials, title: str = "") -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_svg(trials, title), encoding="utf-8")
    return path
