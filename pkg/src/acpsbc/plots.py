"""Dependency-free SVG output: robot paths, clearance series and sweep overlays."""
from __future__ import annotations

import math
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .sim import TrajectoryLog, min_distance_series

WIDTH = 640
HEIGHT = 480
PAD = 48
COLOURS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf")


def _colour(i: int) -> str:
    return COLOURS[i % len(COLOURS)]


class _Frame:
    """Affine map from data coordinates to the SVG canvas (y axis pointing up)."""

    def __init__(self, x0, x1, y0, y1, equal=False):
        if not x1 > x0:
            x0, x1 = x0 - 0.5, x0 + 0.5
        if not y1 > y0:
            y0, y1 = y0 - 0.5, y0 + 0.5
        sx = (WIDTH - 2 * PAD) / (x1 - x0)
        sy = (HEIGHT - 2 * PAD) / (y1 - y0)
        if equal:
            sx = sy = min(sx, sy)
        self.x0, self.x1, self.y0, self.y1, self.sx, self.sy = x0, x1, y0, y1, sx, sy

    def x(self, v):
        return PAD + (v - self.x0) * self.sx

    def y(self, v):
        return HEIGHT - PAD - (v - self.y0) * self.sy

    def points(self, xs, ys) -> str:
        return " ".join(f"{self.x(a):.2f},{self.y(b):.2f}" for a, b in zip(xs, ys)
                        if math.isfinite(a) and math.isfinite(b))


def _document(body: list, title: str) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}">')
    parts = [head, f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
             f'<text x="{WIDTH / 2}" y="24" text-anchor="middle" font-size="14">{title}</text>']
    return "\n".join(parts + body + ["</svg>"]) + "\n"


def _axes(fr: _Frame, xlabel: str, ylabel: str) -> list:
    x0, x1, y0, y1 = fr.x(fr.x0), fr.x(fr.x1), fr.y(fr.y0), fr.y(fr.y1)
    return [
        f'<rect x="{x0:.2f}" y="{y1:.2f}" width="{x1 - x0:.2f}" height="{y0 - y1:.2f}" fill="none" '
        f'stroke="#444" stroke-width="1"/>',
        f'<text x="{(x0 + x1) / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{xlabel}</text>',
        f'<text x="14" y="{(y0 + y1) / 2:.2f}" font-size="12" transform="rotate(-90 14 {(y0 + y1) / 2:.2f})" '
        f'text-anchor="middle">{ylabel}</text>',
        f'<text x="{x0:.2f}" y="{y0 + 16:.2f}" font-size="10">{fr.x0:.3g}</text>',
        f'<text x="{x1:.2f}" y="{y0 + 16:.2f}" font-size="10" text-anchor="end">{fr.x1:.3g}</text>',
        f'<text x="{x0 - 4:.2f}" y="{y0:.2f}" font-size="10" text-anchor="end">{fr.y0:.3g}</text>',
        f'<text x="{x0 - 4:.2f}" y="{y1 + 10:.2f}" font-size="10" text-anchor="end">{fr.y1:.3g}</text>',
    ]


def trajectory_svg(log: TrajectoryLog, obstacles=(), workspace: Optional[Sequence[float]] = None) -> str:
    """Robot paths (reference points) as polylines, obstacles as filled circles, goals as crosses."""
    pts = log.points
    if workspace is None:
        lo = pts.reshape(-1, 2).min(axis=0)
        hi = pts.reshape(-1, 2).max(axis=0)
        workspace = (lo[0], hi[0], lo[1], hi[1])
    fr = _Frame(*workspace, equal=True)
    body = _axes(fr, "x [m]", "y [m]")
    for ob in obstacles:
        body.append(f'<circle cx="{fr.x(ob.center[0]):.2f}" cy="{fr.y(ob.center[1]):.2f}" '
                    f'r="{ob.radius * fr.sx:.2f}" fill="#bbbbbb" stroke="#555"/>')
    for i in range(pts.shape[1]):
        c = _colour(i)
        body.append(f'<polyline points="{fr.points(pts[:, i, 0], pts[:, i, 1])}" fill="none" stroke="{c}" '
                    f'stroke-width="1.2"/>')
        gx, gy = fr.x(log.goals[i, 0]), fr.y(log.goals[i, 1])
        body.append(f'<path d="M{gx - 4:.2f},{gy - 4:.2f} L{gx + 4:.2f},{gy + 4:.2f} M{gx - 4:.2f},{gy + 4:.2f} '
                    f'L{gx + 4:.2f},{gy - 4:.2f}" stroke="{c}" stroke-width="1.5"/>')
        body.append(f'<circle cx="{fr.x(pts[0, i, 0]):.2f}" cy="{fr.y(pts[0, i, 1]):.2f}" r="3" fill="{c}"/>')
    return _document(body, f"{log.scenario}: paths (seed {log.seed})")


def _series_plot(series: list, labels: list, xlabel: str, ylabel: str, title: str, xs=None) -> str:
    finite = [np.asarray(s, float) for s in series if s is not None]
    vals = np.concatenate([s[np.isfinite(s)] for s in finite]) if finite else np.zeros(1)
    if vals.size == 0:
        vals = np.zeros(1)
    lo, hi = min(float(vals.min()), 0.0), max(float(vals.max()), 0.0)
    span = hi - lo or 1.0
    n = max((len(s) for s in finite), default=1)
    if xs is None:
        xs = np.arange(n)
    fr = _Frame(float(xs[0]), float(xs[-1]) if len(xs) > 1 else float(xs[0]) + 1.0,
                lo - 0.05 * span, hi + 0.05 * span)
    body = _axes(fr, xlabel, ylabel)
    body.append(f'<line x1="{fr.x(fr.x0):.2f}" y1="{fr.y(0.0):.2f}" x2="{fr.x(fr.x1):.2f}" y2="{fr.y(0.0):.2f}" '
                f'stroke="black" stroke-dasharray="6,4"/>')
    k = 0
    for s, label in zip(series, labels):
        if s is None:
            continue
        s = np.asarray(s, float)
        c = _colour(k)
        body.append(f'<polyline points="{fr.points(xs[:len(s)], s)}" fill="none" stroke="{c}" stroke-width="1.2"/>')
        body.append(f'<text x="{WIDTH - PAD - 4}" y="{PAD + 14 * (k + 1)}" font-size="11" text-anchor="end" '
                    f'fill="{c}">{label}</text>')
        k += 1
    return _document(body, title)


def min_distance_svg(log: TrajectoryLog) -> str:
    """Per-step minimum clearance for robot-robot and robot-obstacle pairs with a zero reference line."""
    rr, ro = min_distance_series(log)
    return _series_plot([rr, ro], ["robot-robot", "robot-obstacle"], "step", "min clearance [m]",
                        f"{log.scenario}: minimum clearance (seed {log.seed})")


def sweep_svg(parameter: str, values: Sequence, logs: Sequence[TrajectoryLog]) -> str:
    """Overlay of the minimum-clearance series of every sweep run."""
    series = []
    for log in logs:
        rr, ro = min_distance_series(log)
        parts = [s for s in (rr, ro) if s is not None]
        series.append(np.minimum.reduce(parts) if parts else np.full(len(log), np.inf))
    labels = [f"{parameter}={v:g}" for v in values]
    return _series_plot(series, labels, "step", "min clearance [m]", f"sweep over {parameter}")


def write_run_plots(log: TrajectoryLog, out_dir, obstacles=(), workspace=None) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "trajectory.svg", out / "min_distance.svg"]
    paths[0].write_text(trajectory_svg(log, obstacles, workspace))
    paths[1].write_text(min_distance_svg(log))
    return paths
