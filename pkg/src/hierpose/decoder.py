"""Group branch outputs into whole-body poses.

Decoding follows the hierarchy: person centres come from the centre heatmap,
body-branch entries (body keypoints, plus foot keypoints or part centres
depending on the scheme) are regressed from the person centre and snapped to
nearby heatmap detections inside the person box, and part keypoints are
regressed from the resulting part centres.

Work is one pass over the maps plus small per-channel array operations, so
run time barely depends on the number of people.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .errors import ContractError
from .layout import NUM_KEYPOINTS, PART_RANGES, HierarchyScheme, PersonBox
from .maps import PART_SLOTS, PredictionMaps

DETECTED = "detected"
REGRESSED = "regressed"
FALLBACK = "fallback"

DEFAULT_MAX_PEOPLE = 100
DEFAULT_CENTER_THRESHOLD = 0.1
DEFAULT_KEYPOINT_THRESHOLD = 0.1
DEFAULT_FALLBACK_FACTOR = 0.5


@dataclass(frozen=True, eq=False)
class DecodedPerson:
    """A grouped pose in input pixels.

    ``keypoints`` is a (133, 3) array of ``(x, y, score)``; ``sources`` holds one
    of ``detected``, ``regressed`` or ``fallback`` per keypoint.
    """

    score: float
    box: PersonBox
    keypoints: np.ndarray
    sources: np.ndarray


class MatchedPoint(NamedTuple):
    x: float
    y: float
    score: float | None
    source: str


def _local_maxima(heatmap: np.ndarray) -> np.ndarray:
    size = (3, 3) if heatmap.ndim == 2 else (3, 3, 1)
    return heatmap == maximum_filter(heatmap, size=size, mode="constant", cval=-np.inf)


def _top_peaks(heatmap: np.ndarray, max_peaks: int, threshold: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    keep = _local_maxima(heatmap) & (heatmap >= threshold)
    flat = np.flatnonzero(keep)
    scores = heatmap.ravel()[flat]
    # Score descending, row-major cell order among equal scores.
    order = np.lexsort((flat, -scores))[:max_peaks]
    rows, cols = np.divmod(flat[order], heatmap.shape[1])
    return rows, cols, scores[order]


def extract_peaks(
    heatmap: np.ndarray,
    max_peaks: int = DEFAULT_MAX_PEOPLE,
    threshold: float = DEFAULT_CENTER_THRESHOLD,
) -> list[tuple[tuple[int, int], float]]:
    """Top-``max_peaks`` 3x3 local maxima of a 2-D heatmap scoring at least ``threshold``.

    Returns ``((row, col), score)`` pairs sorted by score, ties in row-major order.
    """
    if max_peaks < 1:
        raise ContractError("max_peaks must be >= 1")
    hm = np.asarray(heatmap)
    if hm.ndim != 2:
        raise ContractError(f"expected a 2-D heatmap, got shape {hm.shape}")
    rows, cols, scores = _top_peaks(hm, max_peaks, threshold)
    return [((int(r), int(c)), float(s)) for r, c, s in zip(rows, cols, scores)]


def _match(
    regressed: np.ndarray,
    detected: np.ndarray,
    boxes: np.ndarray,
) -> np.ndarray:
    """Index of the nearest in-box detection for each regressed point, -1 if none.

    ``detected`` must already be in row-major order so ``argmin`` breaks
    distance ties towards the lower cell.
    """
    if len(detected) == 0 or len(regressed) == 0:
        return np.full(len(regressed), -1, dtype=np.int64)
    dx, dy = detected[:, 0], detected[:, 1]
    inside = (
        (dx[None, :] >= boxes[:, 0:1]) & (dx[None, :] <= boxes[:, 2:3])
        & (dy[None, :] >= boxes[:, 1:2]) & (dy[None, :] <= boxes[:, 3:4])
    )
    d2 = ((regressed[:, None, :] - detected[None, :, :]) ** 2).sum(axis=-1)
    d2 = np.where(inside, d2, np.inf)
    idx = d2.argmin(axis=1)
    found = np.isfinite(d2[np.arange(len(regressed)), idx])
    return np.where(found, idx, -1)


def _xyxy(box: PersonBox | Sequence[float], margin: float) -> np.ndarray:
    if isinstance(box, PersonBox):
        (cx, cy), w, h = box.center, box.width, box.height
    else:
        (cx, cy), w, h = box[0], box[1], box[2]
    hw, hh = w * (0.5 + margin), h * (0.5 + margin)
    return np.array([[cx - hw, cy - hh, cx + hw, cy + hh]], dtype=np.float64)


def match_regressed_detected(
    regressed: Sequence[tuple[float, float]],
    detected: Sequence[tuple[tuple[float, float], float]],
    box: PersonBox | Sequence,
    margin: float = 0.0,
    snap: float | None = None,
) -> list[MatchedPoint]:
    """Replace each regressed point by its nearest detection inside ``box``.

    ``box`` is a ``PersonBox`` (or ``(center, width, height)``) grown by
    ``margin`` times its size on each side. Equidistant detections resolve
    to the lower row-major position. Without ``snap`` a match takes the
    detection's coordinates; with ``snap = s`` the regressed point is instead
    clamped into the square of half-width ``s`` around the detection, which
    keeps sub-cell precision when the detection is a cell centre.
    Unmatched points keep their regressed coordinates.
    """
    reg = np.asarray(regressed, dtype=np.float64).reshape(-1, 2)
    det = np.asarray([d[0] for d in detected], dtype=np.float64).reshape(-1, 2)
    det_scores = np.asarray([d[1] for d in detected], dtype=np.float64)
    order = np.lexsort((det[:, 0], det[:, 1])) if len(det) else np.zeros(0, dtype=np.int64)
    det, det_scores = det[order], det_scores[order]
    boxes = np.repeat(_xyxy(box, margin), len(reg), axis=0)
    idx = _match(reg, det, boxes)

    out = []
    for p, i in zip(reg, idx):
        if i < 0:
            out.append(MatchedPoint(float(p[0]), float(p[1]), None, REGRESSED))
            continue
        q = det[i] if snap is None else np.clip(p, det[i] - snap, det[i] + snap)
        out.append(MatchedPoint(float(q[0]), float(q[1]), float(det_scores[i]), DETECTED))
    return out


def decode_people(
    pred: PredictionMaps,
    scheme: HierarchyScheme | str | None = None,
    max_people: int = DEFAULT_MAX_PEOPLE,
    center_threshold: float = DEFAULT_CENTER_THRESHOLD,
    keypoint_threshold: float = DEFAULT_KEYPOINT_THRESHOLD,
    *,
    fallback_factor: float = DEFAULT_FALLBACK_FACTOR,
    box_margin: float = 0.0,
) -> list[DecodedPerson]:
    """Decode prediction maps into scored whole-body poses.

    A body-branch entry matched to a heatmap detection keeps its regressed
    sub-cell position clamped into the detected cell. Part keypoints are
    gathered at the part-centre cell and inherit the part centre's score; if
    the part centre had no detection they are marked ``fallback``. Scores of
    undetected entries are the person score times ``fallback_factor``.
    """
    if scheme is not None and HierarchyScheme.parse(scheme) != pred.scheme:
        raise ContractError(f"maps were built for scheme {pred.scheme.value}, not {scheme}")
    pred.validate()
    scheme = pred.scheme
    stride = float(pred.stride)
    h, w = pred.size

    rows, cols, pscores = _top_peaks(np.asarray(pred.person_center_heatmap), max_people, center_threshold)
    n = len(rows)
    if n == 0:
        return []
    pscores = pscores.astype(np.float64)
    cells = np.stack([cols, rows], axis=1).astype(np.float64)
    centers = cells + pred.person_center_offset[rows, cols]
    wh = pred.person_wh[rows, cols].astype(np.float64)
    half = wh * (0.5 + box_margin)
    boxes = np.concatenate([centers - half, centers + half], axis=1)

    n_body = scheme.body_channels
    regressed = cells[:, None, :] + pred.body_kp_offsets[rows, cols].reshape(n, n_body, 2)

    hm = np.asarray(pred.body_kp_heatmaps)
    ys, xs, cs = np.nonzero(_local_maxima(hm) & (hm >= keypoint_threshold))
    det_scores_all = hm[ys, xs, cs].astype(np.float64)
    order = np.argsort(cs, kind="stable")
    ys, xs, cs, det_scores_all = ys[order], xs[order], cs[order], det_scores_all[order]
    bounds = np.searchsorted(cs, np.arange(n_body + 1))

    # Pad each channel's detections (row-major order within the channel) to a
    # common length so all channels match in one batched argmin.
    counts = np.diff(bounds)
    width = max(int(counts.max()), 1)
    slot = np.arange(len(cs)) - bounds[cs]
    det_cell = np.zeros((n_body, width, 2), dtype=np.int64)
    det_score = np.zeros((n_body, width))
    valid = np.zeros((n_body, width), dtype=bool)
    det_cell[cs, slot] = np.stack([xs, ys], axis=1)
    det_score[cs, slot] = det_scores_all
    valid[cs, slot] = True

    det_xy = det_cell + 0.5
    inside = (
        valid[None]
        & (det_xy[None, :, :, 0] >= boxes[:, None, None, 0]) & (det_xy[None, :, :, 0] <= boxes[:, None, None, 2])
        & (det_xy[None, :, :, 1] >= boxes[:, None, None, 1]) & (det_xy[None, :, :, 1] <= boxes[:, None, None, 3])
    )
    d2 = ((regressed[:, :, None, :] - det_xy[None]) ** 2).sum(axis=-1)
    d2 = np.where(inside, d2, np.inf)
    idx = d2.argmin(axis=2)
    body_detected = np.isfinite(np.take_along_axis(d2, idx[:, :, None], axis=2)[:, :, 0])

    chan = np.arange(n_body)[None, :]
    matched_cell = det_cell[chan, idx]
    body_cell = np.where(body_detected[..., None], matched_cell, np.clip(np.floor(regressed), 0, [w - 1, h - 1]).astype(np.int64))
    body_xy = np.where(body_detected[..., None], np.clip(regressed, matched_cell, matched_cell + 1), regressed)
    body_score = np.where(body_detected, det_score[chan, idx], (pscores * fallback_factor)[:, None])

    kp_xy = np.zeros((n, NUM_KEYPOINTS, 2))
    kp_score = np.zeros((n, NUM_KEYPOINTS))
    sources = np.full((n, NUM_KEYPOINTS), REGRESSED, dtype="<U9")

    direct = np.asarray(scheme.body_direct)
    n_direct = len(direct)
    kp_xy[:, direct] = body_xy[:, :n_direct]
    kp_score[:, direct] = body_score[:, :n_direct]
    sources[:, direct] = np.where(body_detected[:, :n_direct], DETECTED, REGRESSED)

    for j, anchor in enumerate(scheme.body_centers, start=n_direct):
        branch, first = PART_SLOTS[anchor]
        rng = PART_RANGES[anchor]
        pcell = body_cell[:, j]
        offs = getattr(pred, branch)[pcell[:, 1], pcell[:, 0], 2 * first:2 * (first + len(rng))]
        kp_xy[:, rng.start:rng.stop] = pcell[:, None, :] + offs.reshape(n, len(rng), 2)
        kp_score[:, rng.start:rng.stop] = body_score[:, j:j + 1]
        sources[:, rng.start:rng.stop] = np.where(body_detected[:, j:j + 1], REGRESSED, FALLBACK)

    kp_xy *= stride
    centers *= stride
    wh *= stride
    kps = np.concatenate([kp_xy, np.clip(kp_score, 0.0, 1.0)[:, :, None]], axis=2)
    return [
        DecodedPerson(
            score=float(pscores[i]),
            box=PersonBox((float(centers[i, 0]), float(centers[i, 1])), float(wh[i, 0]), float(wh[i, 1])),
            keypoints=kps[i],
            sources=sources[i],
        )
        for i in range(n)
    ]
