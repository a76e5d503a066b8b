"""Synthetic whole-body scenes and stand-in network outputs.

A scene is a set of persons built from a fixed stick-figure template with
seeded limb angles, scale and placement. ``perfect_maps`` turns a scene into
the loss-optimal prediction maps; ``perturb_maps`` then adds seeded noise
whose offset component grows with each keypoint's distance to its anchor,
which is how flat regression of small parts is made to suffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .decoder import _local_maxima
from .encoder import DEFAULT_STRIDE, encode_targets
from .errors import SceneGenerationError
from .layout import (
    FACE,
    LEFT_FOOT,
    LEFT_HAND,
    NUM_KEYPOINTS,
    PART_RANGES,
    RIGHT_FOOT,
    RIGHT_HAND,
    Anchor,
    HierarchyScheme,
    PartBox,
    PersonBox,
    WholeBodyAnnotation,
    derive_part_boxes,
    part_name,
)
from .maps import PART_SLOTS, PredictionMaps


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 0
    n_persons: int = 3
    image_size: int = 512
    scale_range: tuple[float, float] = (128.0, 320.0)  # person height in pixels
    face_scale: float = 0.09  # face landmark width / person height
    hand_scale: float = 0.09  # wrist-to-fingertip / person height
    foot_scale: float = 0.11  # heel-to-toe / person height
    missing_foot_rate: float = 0.0
    stride: int = DEFAULT_STRIDE
    allow_collisions: bool = False
    max_attempts: int = 500


@dataclass(frozen=True)
class NoiseSpec:
    """Perturbation model for prediction maps.

    ``offset_fraction`` scales per-component gaussian offset noise by the
    length of each offset (its anchor distance). ``heatmap_jitter`` is the
    standard deviation, in cells, of keypoint-heatmap peak displacement:
    one value for every channel, or a mapping from part to cells (absent
    parts do not move). ``part_multipliers`` scales both per part. Part keys
    are ``body``, ``foot``, ``face``, ``hand`` and ``center`` (part-centre
    channels of the body branch).
    """

    offset_fraction: float = 0.0
    heatmap_jitter: float | Mapping[str, float] = 0.0
    part_multipliers: Mapping[str, float] = field(default_factory=dict)

    def multiplier(self, part: str) -> float:
        return float(self.part_multipliers.get(part, 1.0))

    def jitter(self, part: str) -> float:
        if isinstance(self.heatmap_jitter, Mapping):
            base = float(self.heatmap_jitter.get(part, 0.0))
        else:
            base = float(self.heatmap_jitter)
        return base * self.multiplier(part)

    @property
    def is_zero(self) -> bool:
        jit = self.heatmap_jitter
        values = jit.values() if isinstance(jit, Mapping) else [jit]
        return self.offset_fraction == 0.0 and all(v == 0.0 for v in values)


# ---------------------------------------------------------------------------
# Template


def _face_template() -> np.ndarray:
    """68 landmarks in a unit face frame (x right, y down, roughly [-0.5, 0.5])."""
    pts = []
    t = np.linspace(0.0, 1.0, 17)
    pts += list(zip(-0.5 * np.cos(np.pi * t), 0.55 * np.sin(np.pi * t) - 0.1))  # jaw
    for side in (-1.0, 1.0):  # brows: subject's right first (image left)
        xs = np.linspace(0.38, 0.08, 5) if side < 0 else np.linspace(0.08, 0.38, 5)
        pts += [(side * abs(x) if side < 0 else x, -0.3 - 0.06 * math.sin(math.pi * (abs(x) - 0.08) / 0.3)) for x in xs]
    pts += [(0.0, y) for y in np.linspace(-0.2, 0.05, 4)]  # nose bridge
    pts += [(x, 0.1 + 0.03 * (1 - abs(x) / 0.1)) for x in np.linspace(-0.1, 0.1, 5)]  # nostrils
    for cx in (-0.22, 0.22):  # eyes
        a = np.linspace(math.pi, -math.pi, 6, endpoint=False)
        pts += list(zip(cx + 0.09 * np.cos(a), -0.18 - 0.04 * np.sin(a)))
    a = np.linspace(math.pi, -math.pi, 12, endpoint=False)
    pts += list(zip(0.2 * np.cos(a), 0.26 - 0.08 * np.sin(a)))  # outer lip
    a = np.linspace(math.pi, -math.pi, 8, endpoint=False)
    pts += list(zip(0.12 * np.cos(a), 0.26 - 0.03 * np.sin(a)))  # inner lip
    out = np.array(pts, dtype=np.float64)
    assert out.shape == (68, 2)
    return out


def _hand_template() -> np.ndarray:
    """21 hand keypoints in a unit frame: wrist at origin, fingers along +u (column 0)."""
    pts = [(0.0, 0.0)]
    # thumb, index, middle, ring, pinky: (base u, base v, spread angle, segment lengths)
    fingers = [
        (0.12, -0.16, -0.7, (0.14, 0.12, 0.10, 0.09)),
        (0.42, -0.12, -0.12, (0.13, 0.13, 0.10, 0.08)),
        (0.44, -0.03, 0.0, (0.14, 0.14, 0.11, 0.08)),
        (0.42, 0.06, 0.12, (0.13, 0.13, 0.10, 0.08)),
        (0.38, 0.14, 0.25, (0.10, 0.10, 0.08, 0.07)),
    ]
    for bu, bv, ang, segs in fingers:
        d = np.array([math.cos(ang), math.sin(ang)])
        p = np.array([bu, bv]) if ang > -0.5 else np.array([0.0, 0.0])
        for i, s in enumerate(segs):
            if i == 0 and ang > -0.5:
                pts.append(tuple(p))
                continue
            p = p + s * d
            pts.append(tuple(p))
    out = np.array(pts, dtype=np.float64)
    assert out.shape == (21, 2)
    return out


_FACE = _face_template()
_HAND = _hand_template()


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _person_template(rng: np.random.Generator, spec: SceneSpec) -> np.ndarray:
    """Complete (133, 2) pose in a unit-height frame centred near the hips."""
    kp = np.zeros((NUM_KEYPOINTS, 2))
    tilt = rng.uniform(-0.15, 0.15)
    head = np.array([0.0, -0.42])
    kp[0] = head + [0.0, 0.01]  # nose
    kp[1], kp[2] = head + [0.022, -0.012], head + [-0.022, -0.012]  # eyes
    kp[3], kp[4] = head + [0.05, 0.0], head + [-0.05, 0.0]  # ears
    kp[5], kp[6] = [0.11, -0.31], [-0.11, -0.31]  # shoulders
    kp[11], kp[12] = [0.08, 0.02], [-0.08, 0.02]  # hips

    forearm_dir = {}
    for side, (sh, el, wr) in ((1.0, (5, 7, 9)), (-1.0, (6, 8, 10))):
        a1 = rng.uniform(0.1, 1.3)
        a2 = a1 + rng.uniform(-0.8, 0.9)
        d1 = np.array([side * math.sin(a1), math.cos(a1)])
        d2 = np.array([side * math.sin(a2), math.cos(a2)])
        kp[el] = kp[sh] + 0.17 * d1
        kp[wr] = kp[el] + 0.15 * d2
        forearm_dir[side] = d2
    for side, (hip, knee, ankle) in ((1.0, (11, 13, 15)), (-1.0, (12, 14, 16))):
        b1 = rng.uniform(-0.05, 0.3)
        b2 = b1 + rng.uniform(-0.2, 0.15)
        kp[knee] = kp[hip] + 0.23 * np.array([side * math.sin(b1), math.cos(b1)])
        kp[ankle] = kp[knee] + 0.22 * np.array([side * math.sin(b2), math.cos(b2)])

    face_w = spec.face_scale * rng.uniform(0.9, 1.1)
    face_center = head + [0.0, 0.005]
    kp[FACE.start:FACE.stop] = face_center + face_w * _FACE @ _rot(tilt).T

    hand_len = spec.hand_scale * rng.uniform(0.9, 1.1)
    for side, rng_k, wrist in ((1.0, LEFT_HAND, 9), (-1.0, RIGHT_HAND, 10)):
        d = forearm_dir[side]
        n = np.array([-d[1], d[0]]) * side
        local = _HAND * hand_len
        kp[rng_k.start:rng_k.stop] = kp[wrist] + local[:, :1] * d + local[:, 1:] * n

    foot_len = spec.foot_scale * rng.uniform(0.9, 1.1)
    for side, rng_k, ankle in ((1.0, LEFT_FOOT, 15), (-1.0, RIGHT_FOOT, 16)):
        ang = rng.uniform(0.4, 1.0)
        f = np.array([side * math.sin(ang), math.cos(ang)])
        n = np.array([-f[1], f[0]])
        a = kp[ankle]
        kp[rng_k.start + 0] = a + foot_len * (0.75 * f + 0.12 * n)  # big toe
        kp[rng_k.start + 1] = a + foot_len * (0.60 * f - 0.18 * n)  # small toe
        kp[rng_k.start + 2] = a + foot_len * (-0.25 * f + 0.05 * n)  # heel

    kp += rng.normal(0.0, 0.002, size=kp.shape)
    return kp @ _rot(rng.uniform(-0.1, 0.1)).T


def _anchor_cells(ann: WholeBodyAnnotation, complete: np.ndarray, stride: int) -> dict[str, tuple[int, int]]:
    cells = {"person": tuple(int(v) for v in np.floor(np.array(ann.person_box.center) / stride))}
    for anchor in PART_RANGES:
        box = ann.part_box(anchor)
        if box.valid:
            cells[anchor.value] = tuple(int(v) for v in np.floor(np.array(box.center) / stride))
        full = _hull_center(complete, anchor)
        cells[f"{anchor.value}/complete"] = tuple(int(v) for v in np.floor(full / stride))
    return cells


def _hull_center(complete: np.ndarray, anchor: Anchor) -> np.ndarray:
    r = PART_RANGES[anchor]
    pts = complete[r.start:r.stop]
    return (pts.min(axis=0) + pts.max(axis=0)) / 2.0


def generate_scene_with_truth(spec: SceneSpec) -> tuple[list[WholeBodyAnnotation], np.ndarray]:
    """Like ``generate_scene`` but also returns the complete (n, 133, 2) poses.

    The complete poses include coordinates for keypoints whose labels were
    dropped, i.e. what an image of the scene would show.
    """
    rng = np.random.default_rng(spec.seed)
    size = float(spec.image_size)
    lo, hi = spec.scale_range
    persons: list[WholeBodyAnnotation] = []
    truths: list[np.ndarray] = []
    taken: dict[str, set[tuple[int, int]]] = {}
    for i in range(spec.n_persons):
        too_big = collided = 0
        for _ in range(spec.max_attempts):
            height = rng.uniform(lo, hi)
            pose = _person_template(rng, spec) * height
            mins, maxs = pose.min(axis=0), pose.max(axis=0)
            span = maxs - mins
            if (span >= size - 2.0).any():
                too_big += 1
                continue
            shift = rng.uniform(1.0 - mins, size - 1.0 - maxs)
            pose = pose + shift
            vis = np.full(NUM_KEYPOINTS, 2.0)
            for foot in (LEFT_FOOT, RIGHT_FOOT):
                if rng.random() < spec.missing_foot_rate:
                    k = int(rng.integers(1, 3))
                    drop = rng.choice(len(foot), size=k, replace=False)
                    vis[foot.start + drop] = 0.0
            pad = 0.06 * span
            x0, y0 = pose.min(axis=0) - pad
            x1, y1 = pose.max(axis=0) + pad
            ann = derive_part_boxes(WholeBodyAnnotation(
                np.column_stack([pose, vis]),
                PersonBox(((x0 + x1) / 2.0, (y0 + y1) / 2.0), x1 - x0, y1 - y0),
                image_id=spec.seed,
            ))
            cells = _anchor_cells(ann, pose, spec.stride)
            if not spec.allow_collisions and any(c in taken.get(key, ()) for key, c in cells.items()):
                collided += 1
                continue
            for key, c in cells.items():
                taken.setdefault(key, set()).add(c)
            persons.append(ann)
            truths.append(pose)
            break
        else:
            reason = (
                f"person taller than the {spec.image_size}px image (scale_range {spec.scale_range})"
                if too_big >= collided
                else f"anchor-cell collisions at stride {spec.stride}"
            )
            raise SceneGenerationError(
                f"could not place person {i + 1} of {spec.n_persons} in a {spec.image_size}x{spec.image_size} "
                f"image after {spec.max_attempts} attempts: {reason}"
            )
    return persons, np.array(truths).reshape(len(truths), NUM_KEYPOINTS, 2)


def generate_scene(spec: SceneSpec) -> list[WholeBodyAnnotation]:
    """Seeded scene of ``spec.n_persons`` annotated persons."""
    return generate_scene_with_truth(spec)[0]


# ---------------------------------------------------------------------------
# Maps


def perfect_maps(
    scene: list[WholeBodyAnnotation],
    scheme: HierarchyScheme | str,
    input_size: int = 512,
    stride: int = DEFAULT_STRIDE,
) -> PredictionMaps:
    """Encoded targets reinterpreted as predictions.

    Regression branches are copied as-is. Heatmaps keep only their peaks
    (value exactly 1.0, zero elsewhere), the minimiser of the focal loss.
    """
    t = encode_targets(scene, scheme, input_size, stride)
    return PredictionMaps(
        **{name: arr.copy() for name, arr in t.tensors().items()},
        scheme=t.scheme,
        stride=t.stride,
    ).with_tensors(
        person_center_heatmap=(t.person_center_heatmap == 1.0).astype(np.float32),
        body_kp_heatmaps=(t.body_kp_heatmaps == 1.0).astype(np.float32),
    )


def evidence_maps(
    scene: list[WholeBodyAnnotation],
    complete: np.ndarray,
    scheme: HierarchyScheme | str,
    input_size: int = 512,
    stride: int = DEFAULT_STRIDE,
) -> PredictionMaps:
    """Perfect maps with part centres placed where the image shows them.

    A network sees the whole part, so its part-centre peak and regressed
    part-centre offset point at the centre of the *complete* part, while the
    part-keypoint offsets it learned stay relative to the annotated-hull
    anchor. For parts with dropped labels the two disagree; elsewhere this
    equals ``perfect_maps``.
    """
    maps = perfect_maps(scene, scheme, input_size, stride)
    scheme = maps.scheme
    n_direct = len(scheme.body_direct)
    t = {name: arr.copy() for name, arr in maps.tensors().items()}
    for ann, pose in zip(scene, complete):
        pcell = np.floor(np.array(ann.person_box.center) / stride)
        px, py = int(pcell[0]), int(pcell[1])
        for j, anchor in enumerate(scheme.body_centers, start=n_direct):
            box = ann.part_box(anchor)
            if not box.valid:
                continue
            seen = _hull_center(pose, anchor) / stride
            labeled = np.array(box.center) / stride
            if np.allclose(seen, labeled):
                continue
            t["body_kp_offsets"][py, px, 2 * j:2 * j + 2] = seen - pcell
            old = np.floor(labeled).astype(int)
            new = np.floor(seen).astype(int)
            if (old == new).all():
                continue
            hm = t["body_kp_heatmaps"][:, :, j]
            hm[old[1], old[0]] = 0.0
            hm[new[1], new[0]] = 1.0
            branch, first = PART_SLOTS[anchor]
            ch = slice(2 * first, 2 * (first + len(PART_RANGES[anchor])))
            block = t[branch][old[1], old[0], ch].copy()
            t[branch][old[1], old[0], ch] = 0.0
            t[branch][new[1], new[0], ch] = block
    return maps.with_tensors(**t)


def _channel_parts(scheme: HierarchyScheme, branch: str) -> list[str]:
    """Noise-multiplier key for every keypoint pair of an offset branch."""
    if branch == "body_kp_offsets":
        return [part_name(k) for k in scheme.body_direct] + ["center"] * len(scheme.body_centers)
    if branch == "face_kp_offsets":
        return ["face"] * len(FACE)
    if branch == "hand_kp_offsets":
        return ["hand"] * 42
    return ["foot"] * 6


def perturb_maps(maps: PredictionMaps, noise: NoiseSpec, seed: int = 0) -> PredictionMaps:
    """Seeded noisy copy of ``maps``; the identity for a zero ``NoiseSpec``.

    Every offset pair ``o`` becomes ``o + fraction * multiplier * |o| * z`` with
    ``z`` standard normal per component, so targets far from their anchor
    wander most. Keypoint-heatmap peaks (3x3 local maxima) move by rounded
    gaussian steps; jittered channels are re-rendered as single-pixel peaks.
    Random draws depend only on the map content, not on the noise levels, so
    raising a level scales the same perturbation.
    """
    if noise.is_zero:
        return maps
    rng = np.random.default_rng(seed)
    scheme = maps.scheme
    updates: dict[str, np.ndarray] = {}
    for branch in ("body_kp_offsets", "hand_kp_offsets", "face_kp_offsets", "foot_kp_offsets"):
        arr = getattr(maps, branch)
        if arr.size == 0:
            continue
        h, w, c = arr.shape
        pairs = arr.reshape(h, w, c // 2, 2).astype(np.float64)
        norm = np.hypot(pairs[..., 0], pairs[..., 1])
        ys, xs, ks = np.nonzero(norm > 0)
        z = rng.standard_normal((len(ys), 2))
        mult = np.array([noise.multiplier(p) for p in _channel_parts(scheme, branch)])[ks]
        scale = noise.offset_fraction * mult * norm[ys, xs, ks]
        pairs[ys, xs, ks] += scale[:, None] * z
        updates[branch] = pairs.reshape(h, w, c).astype(np.float32)

    hm = maps.body_kp_heatmaps
    channel_sd = np.array([noise.jitter(p) for p in _channel_parts(scheme, "body_kp_offsets")])
    if hm.size and (channel_sd > 0).any():
        h, w, c = hm.shape
        ys, xs, cs = np.nonzero(_local_maxima(hm) & (hm > 0.01))
        sd = channel_sd[cs]
        step = np.rint(rng.standard_normal((len(ys), 2)) * sd[:, None]).astype(int)
        out = np.zeros_like(hm)
        ny = np.clip(ys + step[:, 1], 0, h - 1)
        nx = np.clip(xs + step[:, 0], 0, w - 1)
        np.maximum.at(out, (ny, nx, cs), hm[ys, xs, cs])
        updates["body_kp_heatmaps"] = out
        # A displaced part-centre peak takes its part-offset block along, so
        # the anchor error propagates to every keypoint of the part.
        n_direct = len(scheme.body_direct)
        moved = (cs >= n_direct) & ((ny != ys) | (nx != xs))
        for y0, x0, c, y1, x1 in zip(ys[moved], xs[moved], cs[moved], ny[moved], nx[moved]):
            branch, first = PART_SLOTS[scheme.body_centers[c - n_direct]]
            n_kp = len(PART_RANGES[scheme.body_centers[c - n_direct]])
            ch = slice(2 * first, 2 * (first + n_kp))
            arr = updates.get(branch, getattr(maps, branch)).copy()
            block = arr[y0, x0, ch].copy()
            arr[y0, x0, ch] = 0.0
            arr[y1, x1, ch] = block
            updates[branch] = arr
    return maps.with_tensors(**updates)


def part_box_of(ann: WholeBodyAnnotation, anchor: Anchor) -> PartBox:
    return ann.part_box(anchor)
