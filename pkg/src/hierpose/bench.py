"""Decode wall time against person count at a fixed map size."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoder import decode_people
from .errors import ContractError
from .layout import HierarchyScheme
from .synth import SceneSpec, generate_scene, perfect_maps

MIN_REPS = 30
DEFAULT_PERSONS = (1, 5, 10, 20, 30)
BENCH_SCENE = SceneSpec(seed=0, scale_range=(64.0, 160.0))


@dataclass(frozen=True)
class BenchRow:
    n_persons: int
    median_ms: float
    p95_ms: float
    decoded: int
    flagged: bool = False


@dataclass(frozen=True)
class BenchResult:
    rows: tuple[BenchRow, ...]
    map_size: tuple[int, int]
    scheme: HierarchyScheme
    reps: int
    timer_resolution_ms: float
    notes: tuple[str, ...] = field(default=())

    @property
    def flagged(self) -> bool:
        return any(r.flagged for r in self.rows)

    def ratio(self, n: int, base: int = 1) -> float:
        med = {r.n_persons: r.median_ms for r in self.rows}
        return med[n] / med[base]

    def normalized_slope(self) -> float:
        """Least-squares slope of median time against n, over the median at the smallest n."""
        n = np.array([r.n_persons for r in self.rows], dtype=np.float64)
        t = np.array([r.median_ms for r in self.rows])
        if len(n) < 2:
            return 0.0
        slope = np.polyfit(n, t, 1)[0]
        return float(slope / t[np.argmin(n)])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n_persons", "median_ms", "p95_ms"])
            for r in self.rows:
                w.writerow([r.n_persons, f"{r.median_ms:.4f}", f"{r.p95_ms:.4f}"])

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme.value,
            "map_size": list(self.map_size),
            "reps": self.reps,
            "timer_resolution_ms": self.timer_resolution_ms,
            "normalized_slope": self.normalized_slope(),
            "rows": [r.__dict__ for r in self.rows],
            "notes": list(self.notes),
        }


def bench_decode(
    persons_list: Sequence[int] = DEFAULT_PERSONS,
    spec: SceneSpec = BENCH_SCENE,
    reps: int = MIN_REPS,
    *,
    scheme: HierarchyScheme | str = HierarchyScheme.HM2,
    warmup: int = 3,
) -> BenchResult:
    """Time ``decode_people`` on perfect maps of one scene per person count.

    Every scene uses ``spec`` with only ``n_persons`` changed, so map size is
    shared. Rows whose median is within 100x of the timer resolution are
    flagged as unreliable.
    """
    if reps < MIN_REPS:
        raise ContractError(f"reps must be >= {MIN_REPS}, got {reps}")
    if not persons_list:
        raise ContractError("persons_list is empty")
    scheme = HierarchyScheme.parse(scheme)
    resolution_ms = time.get_clock_info("perf_counter").resolution * 1e3
    rows = []
    size = None
    notes = []
    for n in persons_list:
        maps = perfect_maps(generate_scene(replace(spec, n_persons=int(n))), scheme, spec.image_size, spec.stride)
        if size is None:
            size = maps.size
        elif maps.size != size:  # pragma: no cover - one SceneSpec fixes image size
            raise ContractError("all scenes must share one map size")
        for _ in range(warmup):
            decode_people(maps)
        samples = np.empty(reps)
        decoded = 0
        for i in range(reps):
            t0 = time.perf_counter()
            people = decode_people(maps)
            samples[i] = (time.perf_counter() - t0) * 1e3
            decoded = len(people)
        median = float(np.median(samples))
        flagged = resolution_ms > 0.01 * median
        if flagged:
            notes.append(f"n={n}: timer resolution {resolution_ms:.3g} ms exceeds 1% of median {median:.3g} ms")
        rows.append(BenchRow(int(n), median, float(np.percentile(samples, 95)), decoded, flagged))
    return BenchResult(tuple(rows), size, scheme, reps, resolution_ms, tuple(notes))


def svg_chart(result: BenchResult, width: int = 480, height: int = 300) -> str:
    """Line chart of median and p95 decode time against person count."""
    left, right, top, bottom = 56, 16, 24, 40
    ns = [r.n_persons for r in result.rows]
    ymax = max(r.p95_ms for r in result.rows) * 1.15 or 1.0
    xmin, xmax = min(ns), max(ns)
    xspan = (xmax - xmin) or 1

    def px(n: float) -> float:
        return left + (n - xmin) / xspan * (width - left - right)

    def py(v: float) -> float:
        return height - bottom - v / ymax * (height - top - bottom)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{left}" y1="{py(0):.1f}" x2="{width - right}" y2="{py(0):.1f}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{py(0):.1f}" stroke="black"/>',
    ]
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        v = ymax * frac
        parts.append(f'<text x="{left - 6}" y="{py(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
    for n in ns:
        parts.append(f'<text x="{px(n):.1f}" y="{height - bottom + 16}" text-anchor="middle">{n}</text>')
    for key, color in (("median_ms", "#1f77b4"), ("p95_ms", "#ff7f0e")):
        pts = " ".join(f"{px(r.n_persons):.1f},{py(getattr(r, key)):.1f}" for r in result.rows)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
    parts.append(f'<text x="{width / 2}" y="{height - 6}" text-anchor="middle">persons</text>')
    parts.append(f'<text x="{left}" y="14">decode ms ({result.scheme.value}, {result.map_size[1]}x{result.map_size[0]} maps): median, p95</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
