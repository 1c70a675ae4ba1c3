"""Per-iteration metrics rows, their CSV form, and cross-seed aggregation."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1
HEADERS = {
    1: ["samples", "iteration", "eval_return", "success", "kl_step", "tau", "omega_json", "wall_s"],
}
HEADER = HEADERS[SCHEMA_VERSION]
AGGREGATE_HEADER = ["samples", "mean", "ci_low", "ci_high"]


@dataclass
class MetricsRow:
    samples_used: int
    iteration: int
    eval_mean_return: float
    eval_success_rate: float
    base_kl_step: float = 0.0
    omega: list[float] = field(default_factory=list)
    tau: float = float("nan")
    wall_seconds: float = 0.0

    def as_csv(self) -> list[str]:
        return [str(self.samples_used), str(self.iteration), f"{self.eval_mean_return:.10g}",
                f"{self.eval_success_rate:.10g}", f"{self.base_kl_step:.10g}", f"{self.tau:.10g}",
                json.dumps([round(float(w), 10) for w in self.omega]), f"{self.wall_seconds:.4f}"]


class MetricsWriter:
    """Appends rows to a metrics CSV, flushing after each row."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._csv = csv.writer(self._fh)
        self._csv.writerow(HEADER)
        self._fh.flush()
        self._last = -1

    def write(self, row: MetricsRow) -> None:
        if row.samples_used < self._last:
            raise ValueError("samples_used must be non-decreasing")
        self._last = row.samples_used
        self._csv.writerow(row.as_csv())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def rows_to_csv(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.as_csv())
    return buf.getvalue()


def read_metrics(path: str | Path) -> tuple[int, list[dict[str, str]]]:
    """Returns (schema version, rows); unknown headers are rejected."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        version = next((v for v, h in HEADERS.items() if h == header), None)
        if version is None:
            raise ValueError(f"{path}: unrecognized metrics header {header}")
        return version, [dict(zip(header, r)) for r in reader]


def aggregate(paths: list[str | Path], column: str = "success",
              points: int | None = None) -> list[tuple[float, float, float, float]]:
    """Mean and 95% normal-approximation interval across seeds.

    Each curve is linearly interpolated onto a common grid of sample counts,
    running up to the shortest curve's last logged count.
    """
    curves, versions = [], set()
    for p in paths:
        version, rows = read_metrics(p)
        versions.add(version)
        if not rows:
            continue
        x = np.array([float(r["samples"]) for r in rows])
        y = np.array([float(r[column]) for r in rows])
        curves.append((x, y))
    if len(versions) > 1:
        raise ValueError(f"metrics files mix schema versions {sorted(versions)}")
    if not curves:
        return []
    lo = max(c[0][0] for c in curves)
    hi = min(c[0][-1] for c in curves)
    if points is None:
        points = max(len(c[0]) for c in curves)
    grid = np.linspace(lo, hi, points) if hi > lo else np.array([hi])
    ys = np.array([np.interp(grid, x, y) for x, y in curves])
    n = ys.shape[0]
    mean = ys.mean(axis=0)
    half = 1.96 * ys.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(mean)
    return [(float(g), float(m), float(m - h), float(m + h)) for g, m, h in zip(grid, mean, half)]


def aggregate_csv(result) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(AGGREGATE_HEADER)
    for s, m, l, h in result:
        w.writerow([f"{s:.10g}", f"{m:.10g}", f"{l:.10g}", f"{h:.10g}"])
    return buf.getvalue()
