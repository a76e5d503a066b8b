"""Encode whole-body annotations into branch target tensors."""

from __future__ import annotations

import math
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError
from .layout import PART_RANGES, Anchor, HierarchyScheme, WholeBodyAnnotation
from .maps import PART_SLOTS, EncodeDiagnostics, TargetMaps, empty_tensors

DEFAULT_STRIDE = 4
DEFAULT_MIN_OVERLAP = 0.7
DEFAULT_KEYPOINT_RADIUS = 2


def gaussian_radius(box_w: float, box_h: float, min_overlap: float = DEFAULT_MIN_OVERLAP) -> int:
    """Largest corner displacement (in cells) that keeps box IoU >= ``min_overlap``.

    Takes the smallest root over the three corner-displacement cases (one corner
    in / one out, both in, both out), floors it and clamps to at least 1.
    """
    if box_w < 0 or box_h < 0:
        raise ContractError("box size must be non-negative")
    if not 0.0 < min_overlap < 1.0:
        raise ContractError("min_overlap must lie in (0, 1)")
    w, h, o = float(box_w), float(box_h), float(min_overlap)
    area = w * h

    # Shifted box: (h - r)(w - r) / (2hw - (h - r)(w - r)) >= o
    b1 = w + h
    c1 = area * (1.0 - o) / (1.0 + o)
    r1 = (b1 - math.sqrt(max(b1 * b1 - 4.0 * c1, 0.0))) / 2.0

    # Shrunk box: (h - 2r)(w - 2r) / hw >= o
    b2 = 2.0 * (w + h)
    c2 = (1.0 - o) * area
    r2 = (b2 - math.sqrt(max(b2 * b2 - 16.0 * c2, 0.0))) / 8.0

    # Grown box: hw / ((h + 2r)(w + 2r)) >= o
    b3 = 2.0 * o * (w + h)
    c3 = (o - 1.0) * area
    r3 = (-b3 + math.sqrt(max(b3 * b3 - 16.0 * o * c3, 0.0))) / (8.0 * o)

    return max(1, int(math.floor(min(r1, r2, r3))))


@lru_cache(maxsize=64)
def _kernel(radius: int) -> np.ndarray:
    sigma = radius / 3.0
    d = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(d[None, :] ** 2 + d[:, None] ** 2) / (2.0 * sigma * sigma))
    k = k.astype(np.float32)
    k[radius, radius] = 1.0
    k.setflags(write=False)
    return k


def _draw(grid: np.ndarray, cx: int, cy: int, radius: int) -> bool:
    """Max-combine a gaussian into a 2-D view in place; False if the centre is off-grid."""
    h, w = grid.shape
    if not (0 <= cx < w and 0 <= cy < h):
        return False
    radius = max(int(radius), 0)
    k = _kernel(radius) if radius > 0 else np.ones((1, 1), np.float32)
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    window = grid[cy - top:cy + bottom, cx - left:cx + right]
    patch = k[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(window, patch, out=window)
    return True


def render_gaussian(
    grid: np.ndarray,
    center: tuple[float, float],
    radius: int,
    diagnostics: EncodeDiagnostics | None = None,
) -> np.ndarray:
    """Return a copy of ``grid`` with a gaussian peak max-combined at ``center``.

    ``center`` is ``(x, y)`` in map cells and is truncated to an integer cell,
    which receives exactly 1.0. The kernel uses ``sigma = radius / 3`` over the
    ``(2r+1)^2`` neighbourhood. Off-grid centres leave the grid unchanged and
    bump ``diagnostics.gaussians_skipped``.
    """
    out = np.array(grid, copy=True)
    cx, cy = int(math.floor(center[0])), int(math.floor(center[1]))
    if not _draw(out, cx, cy, radius) and diagnostics is not None:
        diagnostics.gaussians_skipped += 1
    return out


def _inside(p: np.ndarray, width: float, height: float) -> bool:
    return 0.0 <= p[0] < width and 0.0 <= p[1] < height


def _input_hw(input_size: int | Sequence[int]) -> tuple[int, int]:
    if isinstance(input_size, (int, np.integer)):
        return int(input_size), int(input_size)
    w, h = input_size
    return int(h), int(w)


def encode_targets(
    annotations: Iterable[WholeBodyAnnotation],
    scheme: HierarchyScheme | str,
    input_size: int | Sequence[int] = 512,
    stride: int = DEFAULT_STRIDE,
    *,
    min_overlap: float = DEFAULT_MIN_OVERLAP,
    keypoint_radius: int = DEFAULT_KEYPOINT_RADIUS,
    include_occluded: bool = True,
) -> TargetMaps:
    """Encode one image's persons into the branch targets of ``scheme``.

    Args:
        annotations: persons of a single image, with part boxes derived.
        scheme: hierarchy scheme deciding which anchor each keypoint uses.
        input_size: input image size in pixels, an int or ``(width, height)``.
        stride: input pixels per map cell.
        min_overlap: IoU used to size person and part-centre gaussians.
        keypoint_radius: gaussian radius for keypoint peaks, in cells.
        include_occluded: encode ``v == 1`` keypoints as well as ``v == 2``.

    Offsets are written at the anchor's integer cell as ``p / stride - cell``.
    When two persons share an anchor cell the later one overwrites the earlier
    regression values and ``diagnostics.collisions`` is incremented.
    """
    scheme = HierarchyScheme.parse(scheme)
    in_h, in_w = _input_hw(input_size)
    if stride <= 0 or in_h % stride or in_w % stride:
        raise ContractError(f"input size {in_w}x{in_h} is not divisible by stride {stride}")
    h, w = in_h // stride, in_w // stride
    t = empty_tensors(scheme, h, w)
    masks = {name: np.zeros(arr.shape, dtype=bool) for name, arr in t.items() if name not in ("person_center_heatmap", "body_kp_heatmaps")}
    diag = EncodeDiagnostics()
    min_v = 1 if include_occluded else 2
    n_direct = len(scheme.body_direct)

    def put(name: str, cy: int, cx: int, ch: int, value: np.ndarray, count: bool = True) -> None:
        if count and not masks[name][cy, cx, ch]:
            diag.encoded_pairs += 1
        t[name][cy, cx, ch:ch + 2] = value
        masks[name][cy, cx, ch:ch + 2] = True

    used: dict[str, set[tuple[int, int]]] = {}

    def claim(key: str, cell: tuple[int, int]) -> None:
        seen = used.setdefault(key, set())
        if cell in seen:
            diag.collisions += 1
        seen.add(cell)

    for ann in annotations:
        kps = ann.keypoints
        box = ann.person_box
        center = np.array(box.center) / stride
        cx, cy = int(math.floor(center[0])), int(math.floor(center[1]))
        if not (0 <= cx < w and 0 <= cy < h):
            diag.out_of_bounds_persons += 1
            continue
        anchor_cell = np.array([cx, cy], dtype=np.float64)
        claim("person", (cx, cy))

        radius = gaussian_radius(box.width / stride, box.height / stride, min_overlap)
        _draw(t["person_center_heatmap"], cx, cy, radius)
        put("person_center_offset", cy, cx, 0, center - anchor_cell, count=False)
        put("person_wh", cy, cx, 0, np.array([box.width, box.height]) / stride, count=False)

        body_hm = t["body_kp_heatmaps"]
        for j, k in enumerate(scheme.body_direct):
            if kps[k, 2] < min_v:
                continue
            if not _inside(kps[k, :2], in_w, in_h):
                diag.out_of_bounds_keypoints += 1
                continue
            p = kps[k, :2] / stride
            put("body_kp_offsets", cy, cx, 2 * j, p - anchor_cell)
            _draw(body_hm[:, :, j], int(p[0]), int(p[1]), keypoint_radius)

        for j, anchor in enumerate(scheme.body_centers, start=n_direct):
            part = ann.part_box(anchor)
            if not part.valid:
                continue
            if not _inside(np.array(part.center), in_w, in_h):
                diag.out_of_bounds_keypoints += 1
                continue
            q = np.array(part.center) / stride
            put("body_kp_offsets", cy, cx, 2 * j, q - anchor_cell)
            r = gaussian_radius(part.width / stride, part.height / stride, min_overlap)
            _draw(body_hm[:, :, j], int(q[0]), int(q[1]), r)

        for anchor in scheme.part_anchors:
            part = ann.part_box(anchor)
            rng = PART_RANGES[anchor]
            labeled = kps[rng.start:rng.stop, 2] >= min_v
            if not part.valid or not _inside(np.array(part.center), in_w, in_h):
                diag.invalid_part_keypoints += int(labeled.sum())
                continue
            q = np.array(part.center) / stride
            pcell = np.floor(q)
            px, py = int(pcell[0]), int(pcell[1])
            claim(anchor.value, (px, py))
            branch, first = PART_SLOTS[anchor]
            for i, k in enumerate(rng):
                if not labeled[i]:
                    continue
                if not _inside(kps[k, :2], in_w, in_h):
                    diag.out_of_bounds_keypoints += 1
                    continue
                put(branch, py, px, 2 * (first + i), kps[k, :2] / stride - pcell)

        face = ann.part_box(Anchor.FACE)
        if face.valid and _inside(np.array(face.center), in_w, in_h):
            fx, fy = (int(v) for v in np.floor(np.array(face.center) / stride))
            if Anchor.FACE not in scheme.part_anchors:
                claim(Anchor.FACE.value, (fx, fy))
            put("face_box_wh", fy, fx, 0, np.array([face.width, face.height]) / stride, count=False)

    return TargetMaps(**t, scheme=scheme, stride=stride, masks=masks, diagnostics=diag)
