"""Training objective with analytic gradients w.r.t. the predictions.

Heatmap branches use the penalty-reduced focal loss, offset branches a masked
L1, and the two width/height branches a masked L1 scaled by 0.1. The total is
the plain sum over branches.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ContractError
from .maps import ALL_BRANCHES, HEATMAP_BRANCHES, OFFSET_BRANCHES, SIZE_BRANCHES, PredictionMaps, TargetMaps

EPS = 1e-7
ALPHA = 2.0
BETA = 4.0
SIZE_SCALE = 0.1


def _check_shapes(pred: np.ndarray, target: np.ndarray, mask: np.ndarray | None = None) -> None:
    if pred.shape != target.shape:
        raise ContractError(f"prediction shape {pred.shape} != target shape {target.shape}")
    if mask is not None and mask.shape != pred.shape:
        raise ContractError(f"mask shape {mask.shape} != prediction shape {pred.shape}")


def focal_loss(
    pred: np.ndarray,
    target: np.ndarray,
    alpha: float = ALPHA,
    beta: float = BETA,
) -> tuple[float, np.ndarray]:
    """Penalty-reduced pixelwise focal loss and its gradient.

    Pixels with ``target == 1`` are positives; every other pixel is a negative
    down-weighted by ``(1 - target) ** beta``. The sum is normalised by the
    number of positives (at least 1). ``pred`` must lie strictly inside (0, 1).
    """
    _check_shapes(pred, target)
    p = np.asarray(pred, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    pos = y == 1.0
    n = max(1, int(pos.sum()))

    log_p = np.log(p)
    log_1mp = np.log1p(-p)
    one_m_p = 1.0 - p
    neg_w = (1.0 - y) ** beta

    pos_term = one_m_p ** alpha * log_p
    neg_term = neg_w * p ** alpha * log_1mp
    value = -float(np.where(pos, pos_term, neg_term).sum()) / n

    d_pos = -alpha * one_m_p ** (alpha - 1.0) * log_p + one_m_p ** alpha / p
    d_neg = neg_w * (alpha * p ** (alpha - 1.0) * log_1mp - p ** alpha / one_m_p)
    grad = -np.where(pos, d_pos, d_neg) / n
    return value, grad


def _masked_l1(pred: np.ndarray, target: np.ndarray, mask: np.ndarray, normalize: bool) -> tuple[float, np.ndarray]:
    _check_shapes(pred, target, mask)
    m = np.asarray(mask, dtype=bool)
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    # Masks come in (x, y) pairs, so the keypoint count is half the set entries.
    norm = max(1.0, m.sum() / 2.0) if normalize else 1.0
    value = float(np.abs(diff[m]).sum()) / norm
    grad = np.where(m, np.sign(diff), 0.0) / norm
    return value, grad


def offset_l1_loss(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    normalize: bool = True,
) -> tuple[float, np.ndarray]:
    """Masked L1 over offset channels, divided by the masked keypoint count.

    The subgradient at a zero residual is 0.
    """
    return _masked_l1(pred, target, mask, normalize)


def size_l1_loss(
    pred: np.ndarray,
    target: np.ndarray,
    mask: np.ndarray,
    normalize: bool = True,
    scale: float = SIZE_SCALE,
) -> tuple[float, np.ndarray]:
    value, grad = _masked_l1(pred, target, mask, normalize)
    return scale * value, scale * grad


@dataclass
class LossReport:
    losses: dict[str, float]
    total: float
    gradients: dict[str, np.ndarray] = field(repr=False)

    def as_dict(self) -> dict[str, float]:
        return {**self.losses, "total": self.total}


def total_loss(
    pred: PredictionMaps,
    target: TargetMaps,
    *,
    weights: Mapping[str, float] | None = None,
    normalize: bool = True,
    eps: float = EPS,
) -> LossReport:
    """Sum of all branch losses for one image.

    Heatmap predictions are clamped to ``[eps, 1 - eps]`` first; gradients are
    taken at the clamped values. ``weights`` multiplies individual branches
    (default 1 everywhere; the 0.1 size scaling is always applied).
    """
    if pred.scheme != target.scheme:
        raise ContractError(f"scheme mismatch: prediction {pred.scheme.value}, target {target.scheme.value}")
    weights = dict(weights or {})
    losses: dict[str, float] = {}
    grads: dict[str, np.ndarray] = {}
    for name in ALL_BRANCHES:
        p = getattr(pred, name)
        y = getattr(target, name)
        if name in HEATMAP_BRANCHES:
            value, grad = focal_loss(np.clip(p, eps, 1.0 - eps), y)
        elif name in OFFSET_BRANCHES:
            value, grad = offset_l1_loss(p, y, target.masks[name], normalize)
        elif name in SIZE_BRANCHES:
            value, grad = size_l1_loss(p, y, target.masks[name], normalize)
        else:  # pragma: no cover
            raise AssertionError(name)
        wgt = float(weights.get(name, 1.0))
        losses[name] = wgt * value
        grads[name] = wgt * grad
    return LossReport(losses, float(sum(losses.values())), grads)
