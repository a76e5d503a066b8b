"""Finite-difference checks of the analytic loss gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .losses import EPS, focal_loss, offset_l1_loss, size_l1_loss
from .maps import ALL_BRANCHES, HEATMAP_BRANCHES, SIZE_BRANCHES, PredictionMaps, TargetMaps

DEFAULT_STEP = 1e-5
DEFAULT_TOLERANCE = 1e-4
KINK_MARGIN = 0.05
RESOLUTION = 1e5


@dataclass(frozen=True)
class GradCheck:
    loss: str
    points: int
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "branch": self.loss,
            "points": self.points,
            "analytic_vs_fd_max_rel_err": self.max_rel_error,
            "tolerance": self.tolerance,
            "pass": self.passed,
        }


def rel_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _central(f: Callable[[np.ndarray], float], x: np.ndarray, idx: tuple, h: float) -> float:
    xp, xm = x.copy(), x.copy()
    xp[idx] += h
    xm[idx] -= h
    return (f(xp) - f(xm)) / (2.0 * h)


def _focal_case(rng: np.random.Generator, shape: tuple) -> tuple[Callable, np.ndarray]:
    # Negatives close to 1 or predictions near 0 give gradients around 1e-8,
    # below what a 1e-5 central difference of the summed loss can resolve.
    target = rng.uniform(0.0, 0.8, shape)
    target[rng.random(shape) < 0.1] = 1.0
    pred = rng.uniform(0.05, 0.95, shape)
    return (lambda p: focal_loss(p, target)), pred


def _l1_case(rng: np.random.Generator, shape: tuple, scaled: bool) -> tuple[Callable, np.ndarray]:
    target = rng.normal(0.0, 2.0, shape)
    # Keep every residual at least KINK_MARGIN away from zero.
    gap = rng.uniform(KINK_MARGIN, 1.0, shape) * rng.choice([-1.0, 1.0], shape)
    pred = target + gap
    mask = rng.random(shape) < 0.7
    fn = size_l1_loss if scaled else offset_l1_loss
    return (lambda p: fn(p, target, mask)), pred


def check_loss(
    loss: str,
    points: int = 100,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
    shape: tuple[int, ...] = (6, 6, 4),
) -> GradCheck:
    """Compare analytic and central-difference gradients at ``points`` random entries.

    Each point draws a fresh random problem of ``shape`` and one entry of it.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(points):
        if loss == "focal":
            fn, x = _focal_case(rng, shape)
        elif loss == "offset_l1":
            fn, x = _l1_case(rng, shape, scaled=False)
        elif loss == "size_l1":
            fn, x = _l1_case(rng, shape, scaled=True)
        else:
            raise ValueError(f"unknown loss {loss!r}")
        idx = tuple(int(rng.integers(0, n)) for n in shape)
        analytic = float(fn(x)[1][idx])
        numeric = _central(lambda p: fn(p)[0], x, idx, step)
        worst = max(worst, rel_error(analytic, numeric))
    worst = float(worst)
    return GradCheck(loss, points, worst, tolerance)


def check_all(points: int = 100, seed: int = 0, step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOLERANCE) -> list[GradCheck]:
    return [check_loss(name, points, seed + i, step, tolerance) for i, name in enumerate(("focal", "offset_l1", "size_l1"))]


def check_maps(
    pred: PredictionMaps,
    target: TargetMaps,
    points: int = 100,
    seed: int = 0,
    step: float = DEFAULT_STEP,
    tolerance: float = DEFAULT_TOLERANCE,
) -> list[GradCheck]:
    """Per-branch gradient check on real map tensors.

    Entries are sampled where the check is well conditioned: heatmap
    predictions in [0.05, 0.95] whose gradient is at least ``RESOLUTION``
    times the roundoff floor of a central difference of the summed loss
    (eps * |L| / step), and masked regression residuals at least
    ``KINK_MARGIN`` from zero. Branches with no such entry report 0 points.
    """
    rng = np.random.default_rng(seed)
    out = []
    for name in ALL_BRANCHES:
        p = np.asarray(getattr(pred, name), dtype=np.float64)
        y = np.asarray(getattr(target, name), dtype=np.float64)
        if p.size == 0:
            continue
        if name in HEATMAP_BRANCHES:
            p = np.clip(p, EPS, 1.0 - EPS)  # as total_loss does
            fn = lambda x, y=y: focal_loss(x, y)
            value, grad = fn(p)
            floor = np.finfo(np.float64).eps * max(abs(value), 1.0) / step
            ok = (p >= 0.05) & (p <= 0.95) & (np.abs(grad) >= RESOLUTION * floor)
        else:
            mask = target.masks[name]
            ok = mask & (np.abs(p - y) >= KINK_MARGIN)
            loss_fn = size_l1_loss if name in SIZE_BRANCHES else offset_l1_loss
            fn = lambda x, y=y, m=mask, f=loss_fn: f(x, y, m)
        cand = np.argwhere(ok)
        if len(cand) > points:
            cand = cand[rng.choice(len(cand), size=points, replace=False)]
        worst = 0.0
        if len(cand):
            grad = fn(p)[1]
            for idx in map(tuple, cand):
                numeric = _central(lambda x: fn(x)[0], p, idx, step)
                worst = max(worst, rel_error(float(grad[idx]), numeric))
        out.append(GradCheck(name, len(cand), float(worst), tolerance))
    return out
