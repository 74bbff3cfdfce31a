"""Evaluation protocol, metrics CSV persistence and static SVG learning curves."""
from __future__ import annotations

import csv
import math
import os
from dataclasses import astuple, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError, MetricsLockError
from .serialization import fmt_float

METRICS_HEADER = ("step", "seed", "mean_return", "solve_rate", "loss_total",
                  "loss_expert_term", "loss_value_term", "wallclock")


@dataclass(frozen=True)
class MetricsRow:
    step: int
    seed: int
    mean_return: float
    solve_rate: float
    loss_total: float
    loss_expert_term: float
    loss_value_term: float
    wallclock: float


def evaluate(policy, env, n_episodes: int, seed: int) -> tuple[float, float]:
    """Mean undiscounted return and solve rate over ``n_episodes`` fresh episodes.

    Episode ``e`` resets with a seed derived from ``(seed, e)`` and samples
    actions from its own stream, so results do not depend on training RNGs.
    """
    from .expert import episode_seed

    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    returns, solved = [], []
    for ep in range(n_episodes):
        rng = np.random.default_rng([seed, ep, 7])
        S, obs = env.reset(episode_seed(seed, ep))
        total, done = 0.0, False
        while not done:
            S, obs, r, done = env.step(policy.act(S, obs, rng))
            total += r
        returns.append(total)
        solved.append(1.0 if env.solved() else 0.0)
    return float(np.mean(returns)), float(np.mean(solved))


# ---- metrics CSV ---------------------------------------------------------------------------
def _row_cells(row: MetricsRow) -> list[str]:
    cells = []
    for f, value in zip(fields(MetricsRow), astuple(row)):
        if f.type in ("int", int):
            cells.append(str(int(value)))
        else:
            if not math.isfinite(value):
                raise ValueError(f"metrics field {f.name} is not finite: {value}")
            cells.append(fmt_float(value))
    return cells


class MetricsWriter:
    """Exclusive appender for one metrics CSV.

    A sibling ``.lock`` file is created with O_EXCL; a second writer on the
    same path fails with MetricsLockError until the first one closes.
    """

    def __init__(self, path):
        self.path = Path(path)
        self.lock_path = self.path.with_name(self.path.name + ".lock")
        self._fh = None
        self._last_step: dict[int, int] = {}

    def __enter__(self) -> "MetricsWriter":
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise MetricsLockError(f"{self.path} is locked by another writer") from None
        os.close(fd)
        fresh = not self.path.exists() or self.path.stat().st_size == 0
        if not fresh:
            for row in read_metrics(self.path):
                self._last_step[row.seed] = row.step
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        if fresh:
            self._fh.write(",".join(METRICS_HEADER) + "\n")
        return self

    def write(self, row: MetricsRow) -> None:
        last = self._last_step.get(row.seed)
        if last is not None and row.step <= last:
            raise ValueError(f"seed {row.seed}: step {row.step} does not increase past {last}")
        self._last_step[row.seed] = row.step
        self._fh.write(",".join(_row_cells(row)) + "\n")
        self._fh.flush()

    def __exit__(self, *exc) -> None:
        if self._fh is not None:
            self._fh.close()
        self.lock_path.unlink(missing_ok=True)


def write_metrics(rows, path, append: bool = False) -> None:
    path = Path(path)
    if not append and path.exists():
        path.unlink()
    with MetricsWriter(path) as w:
        for row in rows:
            w.write(row)


def read_metrics(path) -> list[MetricsRow]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != METRICS_HEADER:
            raise FormatError(f"{path}: metrics header must be {','.join(METRICS_HEADER)}", line=1)
        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if len(cells) != len(METRICS_HEADER):
                raise FormatError(f"{path}: expected {len(METRICS_HEADER)} columns", line=lineno)
            try:
                rows.append(MetricsRow(int(cells[0]), int(cells[1]),
                                       *(float(c) for c in cells[2:])))
            except ValueError as exc:
                raise FormatError(f"{path}: {exc}", line=lineno) from None
    return rows


# ---- SVG learning curves ---------------------------------------------------------------
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _curve(rows: list[MetricsRow], metric: str):
    by_step: dict[int, list[float]] = {}
    for r in rows:
        by_step.setdefault(r.step, []).append(getattr(r, metric))
    steps = sorted(by_step)
    vals = [np.array(by_step[s]) for s in steps]
    return (np.array(steps, dtype=float), np.array([v.mean() for v in vals]),
            np.array([v.min() for v in vals]), np.array([v.max() for v in vals]))


def plot_metrics(series: dict[str, list[MetricsRow]], out_path, metric: str = "mean_return",
                 width: int = 640, height: int = 400, title: str = "") -> None:
    """Mean curve per series with a min/max band across seeds."""
    pad_l, pad_r, pad_t, pad_b = 64, 16, 32, 40
    curves = {name: _curve(rows, metric) for name, rows in series.items() if rows}
    if not curves:
        raise ValueError("nothing to plot")
    xs = np.concatenate([c[0] for c in curves.values()])
    ys = np.concatenate([np.concatenate([c[2], c[3]]) for c in curves.values()])
    x0, x1 = float(xs.min()), float(xs.max()) or 1.0
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0

    def px(x):
        return pad_l + (x - x0) / (x1 - x0) * (width - pad_l - pad_r)

    def py(y):
        return height - pad_b - (y - y0) / (y1 - y0) * (height - pad_t - pad_b)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad_l}" y1="{height - pad_b}" x2="{width - pad_r}" y2="{height - pad_b}" stroke="black"/>',
             f'<line x1="{pad_l}" y1="{pad_t}" x2="{pad_l}" y2="{height - pad_b}" stroke="black"/>']
    for frac in np.linspace(0, 1, 5):
        xv, yv = x0 + frac * (x1 - x0), y0 + frac * (y1 - y0)
        parts.append(f'<text x="{px(xv):.1f}" y="{height - pad_b + 14}" text-anchor="middle">{xv:.4g}</text>')
        parts.append(f'<text x="{pad_l - 4}" y="{py(yv) + 4:.1f}" text-anchor="end">{yv:.4g}</text>')
    parts.append(f'<text x="{(width + pad_l) / 2:.0f}" y="{height - 6}" text-anchor="middle">step</text>')
    parts.append(f'<text x="{pad_l}" y="{pad_t - 12}">{title or metric}</text>')
    for i, (name, (st, mu, lo, hi)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        band = [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(st, hi)]
        band += [f"{px(x):.1f},{py(y):.1f}" for x, y in zip(st[::-1], lo[::-1])]
        parts.append(f'<polygon points="{" ".join(band)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(st, mu))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="1.5"/>')
        parts.append(f'<text x="{width - pad_r - 4}" y="{pad_t + 14 * i}" text-anchor="end" fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(out_path).write_text("\n".join(parts) + "\n", encoding="utf-8")
