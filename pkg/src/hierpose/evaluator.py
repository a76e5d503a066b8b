"""OKS keypoint AP/AR per whole-body part and box AP for faces from keypoints.

Matching and accumulation follow the COCO protocol: detections are visited in
descending score order and greedily take the unmatched ground truth with the
highest similarity above the threshold; precision is interpolated at 101
recall points.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .decoder import DecodedPerson
from .errors import AnnotationError, ContractError
from .layout import FACE, NUM_KEYPOINTS, PARTS, Anchor, PersonBox, WholeBodyAnnotation

OKS_THRESHOLDS = np.round(np.linspace(0.5, 0.95, 10), 2)
RECALL_THRESHOLDS = np.round(np.linspace(0.0, 1.0, 101), 2)
DEFAULT_MAX_DETS = 20
BOX_MAX_DETS = 100
AREA_RANGES = {
    "all": (0.0, 1e10),
    "medium": (32.0 ** 2, 96.0 ** 2),
    "large": (96.0 ** 2, 1e10),
}


def load_sigmas(path: str | Path | None = None) -> np.ndarray:
    """Per-keypoint OKS falloff constants (133,).

    The JSON file lists the published COCO-WholeBody ``sigmas``; the falloff
    used in the similarity is twice that, as in the reference evaluator.
    """
    if path is None:
        text = resources.files("hierpose").joinpath("data/wholebody_sigmas.json").read_text()
    else:
        text = Path(path).read_text()
    data = json.loads(text)
    sigmas = np.asarray(data["sigmas"] if isinstance(data, Mapping) else data, dtype=np.float64)
    if sigmas.shape != (NUM_KEYPOINTS,):
        raise ContractError(f"sigma table must have {NUM_KEYPOINTS} entries, got {sigmas.size}")
    if not (sigmas > 0).all():
        raise ContractError("sigma table entries must be positive")
    return 2.0 * sigmas


def _part_indices(part: str | range | Sequence[int]) -> np.ndarray:
    if isinstance(part, str):
        if part not in PARTS:
            raise ContractError(f"unknown part {part!r}; expected one of {', '.join(PARTS)}")
        part = PARTS[part]
    idx = np.asarray(list(part), dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= NUM_KEYPOINTS:
        raise ContractError("part indices must lie within the 133-keypoint layout")
    return idx


def oks(
    pred: DecodedPerson | np.ndarray,
    gt: WholeBodyAnnotation,
    part: str | range | Sequence[int],
    sigmas: np.ndarray,
) -> float | None:
    """Keypoint similarity over one part, or ``None`` if ``gt`` has no labeled keypoint there.

    Mean over labeled part keypoints of ``exp(-d^2 / (2 s^2 sigma^2))`` with
    ``s^2`` the ground-truth person-box area.
    """
    idx = _part_indices(part)
    xy = pred.keypoints if isinstance(pred, DecodedPerson) else np.asarray(pred)
    labeled = gt.keypoints[idx, 2] > 0
    if not labeled.any():
        return None
    sel = idx[labeled]
    d2 = ((xy[sel, :2] - gt.keypoints[sel, :2]) ** 2).sum(axis=1)
    s2 = gt.person_box.area
    return float(np.exp(-d2 / (2.0 * s2 * sigmas[sel] ** 2)).mean())


def _oks_matrix(dts: Sequence[DecodedPerson], gts: Sequence[WholeBodyAnnotation], idx: np.ndarray, sigmas: np.ndarray) -> np.ndarray:
    if not dts or not gts:
        return np.zeros((len(dts), len(gts)))
    d = np.stack([p.keypoints[idx, :2] for p in dts])  # (D, K, 2)
    g = np.stack([a.keypoints[idx, :2] for a in gts])  # (G, K, 2)
    vis = np.stack([a.keypoints[idx, 2] > 0 for a in gts])  # (G, K)
    s2 = np.array([a.person_box.area for a in gts])
    d2 = ((d[:, None] - g[None]) ** 2).sum(-1)  # (D, G, K)
    e = np.exp(-d2 / (2.0 * s2[None, :, None] * sigmas[idx][None, None, :] ** 2))
    return (e * vis[None]).sum(-1) / vis.sum(-1)[None]


def match_image(
    similarity: np.ndarray,
    thresholds: Sequence[float],
    gt_ignore: np.ndarray | None = None,
    dt_outside: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Greedy COCO matching for one image.

    ``similarity`` is (D, G) with detections already sorted by descending
    score. Returns ``(dt_match, dt_ignore)``, each (T, D): the matched gt index
    (-1 when unmatched) and whether the detection is ignored at that
    threshold (matched to an ignored gt, or unmatched and outside the area
    range given by ``dt_outside``).
    """
    n_dt, n_gt = similarity.shape
    gt_ignore = np.zeros(n_gt, dtype=bool) if gt_ignore is None else np.asarray(gt_ignore, dtype=bool)
    gt_order = np.argsort(gt_ignore, kind="mergesort")
    sim = similarity[:, gt_order]
    ig = gt_ignore[gt_order]
    dt_match = np.full((len(thresholds), n_dt), -1, dtype=np.int64)
    dt_ignore = np.zeros((len(thresholds), n_dt), dtype=bool)
    for ti, t in enumerate(thresholds):
        taken = np.zeros(n_gt, dtype=bool)
        for di in range(n_dt):
            best = min(t, 1 - 1e-10)
            m = -1
            for gi in range(n_gt):
                if taken[gi]:
                    continue
                if m > -1 and not ig[m] and ig[gi]:
                    break
                if sim[di, gi] < best:
                    continue
                best = sim[di, gi]
                m = gi
            if m == -1:
                continue
            taken[m] = True
            dt_match[ti, di] = gt_order[m]
            dt_ignore[ti, di] = ig[m]
    if dt_outside is not None:
        dt_ignore |= (dt_match < 0) & np.asarray(dt_outside, dtype=bool)[None, :]
    return dt_match, dt_ignore


@dataclass
class _ImageEval:
    scores: np.ndarray
    dt_match: np.ndarray
    dt_ignore: np.ndarray
    n_positive: int


def _accumulate(evals: Iterable[_ImageEval], n_thresholds: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-threshold interpolated precision curve (T, R) and final recall (T,).

    Returns NaN-filled arrays when there is no positive ground truth.
    """
    evals = list(evals)
    n_pos = sum(e.n_positive for e in evals)
    precision = np.full((n_thresholds, len(RECALL_THRESHOLDS)), np.nan)
    recall = np.full(n_thresholds, np.nan)
    if n_pos == 0:
        return precision, recall
    scores = np.concatenate([e.scores for e in evals]) if evals else np.zeros(0)
    order = np.argsort(-scores, kind="mergesort")
    match = np.concatenate([e.dt_match for e in evals], axis=1)[:, order] if evals else np.zeros((n_thresholds, 0))
    ignore = np.concatenate([e.dt_ignore for e in evals], axis=1)[:, order] if evals else np.zeros((n_thresholds, 0), bool)
    tps = np.cumsum((match >= 0) & ~ignore, axis=1, dtype=np.float64)
    fps = np.cumsum((match < 0) & ~ignore, axis=1, dtype=np.float64)
    for t in range(n_thresholds):
        tp, fp = tps[t], fps[t]
        q = np.zeros(len(RECALL_THRESHOLDS))
        if len(tp) == 0:
            recall[t] = 0.0
            precision[t] = q
            continue
        rc = tp / n_pos
        pr = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)
        recall[t] = rc[-1]
        pr = np.maximum.accumulate(pr[::-1])[::-1]
        inds = np.searchsorted(rc, RECALL_THRESHOLDS, side="left")
        valid = inds < len(pr)
        q[valid] = pr[inds[valid]]
        precision[t] = q
    return precision, recall


@dataclass(frozen=True)
class PartScore:
    ap: float
    ar: float

    @property
    def defined(self) -> bool:
        return not (math.isnan(self.ap) or math.isnan(self.ar))


def _sorted_dets(dets: Sequence[Any], max_dets: int) -> list[Any]:
    scores = np.array([d.score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="mergesort")[:max_dets]
    return [dets[i] for i in order]


def evaluate_keypoint_ap(
    results: Mapping[Any, Sequence[DecodedPerson]],
    gts: Mapping[Any, Sequence[WholeBodyAnnotation]],
    part: str | range | Sequence[int],
    sigmas: np.ndarray,
    max_dets: int = DEFAULT_MAX_DETS,
    thresholds: Sequence[float] = OKS_THRESHOLDS,
) -> PartScore:
    """AP and AR for one part, averaged over OKS thresholds.

    Ground-truth persons without a labeled keypoint in ``part`` take no part
    in that part's evaluation. Both values are NaN when no ground truth is
    left.
    """
    idx = _part_indices(part)
    evals = []
    for image_id, image_gts in gts.items():
        kept = [g for g in image_gts if (g.keypoints[idx, 2] > 0).any()]
        dts = _sorted_dets(list(results.get(image_id, ())), max_dets)
        sim = _oks_matrix(dts, kept, idx, sigmas)
        dt_match, dt_ignore = match_image(sim, thresholds)
        evals.append(_ImageEval(np.array([d.score for d in dts], dtype=np.float64), dt_match, dt_ignore, len(kept)))
    precision, recall = _accumulate(evals, len(thresholds))
    if np.isnan(recall).all():
        return PartScore(math.nan, math.nan)
    return PartScore(float(precision.mean()), float(recall.mean()))


@dataclass
class EvalReport:
    """Per-part AP/AR plus the mean over the five part columns."""

    parts: dict[str, PartScore]
    mean: PartScore = field(init=False)

    def __post_init__(self) -> None:
        aps = [s.ap for s in self.parts.values()]
        ars = [s.ar for s in self.parts.values()]
        self.mean = PartScore(float(np.mean(aps)), float(np.mean(ars)))

    def to_dict(self) -> dict[str, dict[str, float | None]]:
        def clean(v: float) -> float | None:
            return None if math.isnan(v) else v

        out = {name: {"ap": clean(s.ap), "ar": clean(s.ar)} for name, s in self.parts.items()}
        out["wholebody-mean"] = {"ap": clean(self.mean.ap), "ar": clean(self.mean.ar)}
        return out

    def to_table(self) -> str:
        cols = list(self.parts) + ["wholebody-mean"]
        scores = list(self.parts.values()) + [self.mean]
        width = 16
        head = "".join(f"{c:^{width}}" for c in cols)
        sub = "".join(f"{'AP':>7} {'AR':>7} " for _ in cols)

        def fmt(v: float) -> str:
            return f"{'n/a':>7}" if math.isnan(v) else f"{100 * v:7.1f}"

        row = "".join(f"{fmt(s.ap)} {fmt(s.ar)} " for s in scores)
        return "\n".join([head.rstrip(), sub.rstrip(), row.rstrip()])


def evaluate_wholebody(
    results: Mapping[Any, Sequence[DecodedPerson]],
    gts: Mapping[Any, Sequence[WholeBodyAnnotation]],
    sigmas: np.ndarray | None = None,
    max_dets: int = DEFAULT_MAX_DETS,
) -> EvalReport:
    sigmas = load_sigmas() if sigmas is None else sigmas
    return EvalReport({name: evaluate_keypoint_ap(results, gts, name, sigmas, max_dets) for name in PARTS})


# ---------------------------------------------------------------------------
# Face boxes


@dataclass(frozen=True)
class ScoredBox:
    x: float
    y: float
    w: float
    h: float
    score: float = 1.0

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)

    @property
    def area(self) -> float:
        return self.w * self.h


def face_boxes_from_keypoints(person: DecodedPerson, threshold: float = 0.0) -> ScoredBox | None:
    """Axis-aligned hull of the face keypoints scoring above ``threshold``.

    The box score is the mean score of those keypoints. Returns ``None`` when
    no face keypoint qualifies.
    """
    face = person.keypoints[FACE.start:FACE.stop]
    ok = face[:, 2] > threshold
    if not ok.any():
        return None
    pts = face[ok]
    x0, y0 = pts[:, 0].min(), pts[:, 1].min()
    x1, y1 = pts[:, 0].max(), pts[:, 1].max()
    return ScoredBox(float(x0), float(y0), float(x1 - x0), float(y1 - y0), float(pts[:, 2].mean()))


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    """IoU of two ``(x, y, w, h)`` boxes; 0 when the union is empty."""
    ax, ay, aw, ah = a
    bx, by, bw, bh = b
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return float(inter / union) if union > 0 else 0.0


def _iou_matrix(dts: Sequence[ScoredBox], gts: Sequence[Sequence[float]]) -> np.ndarray:
    if not dts or not gts:
        return np.zeros((len(dts), len(gts)))
    d = np.array([b.xywh for b in dts], dtype=np.float64)
    g = np.array(gts, dtype=np.float64)
    x0 = np.maximum(d[:, None, 0], g[None, :, 0])
    y0 = np.maximum(d[:, None, 1], g[None, :, 1])
    x1 = np.minimum(d[:, None, 0] + d[:, None, 2], g[None, :, 0] + g[None, :, 2])
    y1 = np.minimum(d[:, None, 1] + d[:, None, 3], g[None, :, 1] + g[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    union = (d[:, 2] * d[:, 3])[:, None] + (g[:, 2] * g[:, 3])[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


@dataclass(frozen=True)
class BoxAPReport:
    ap: float
    ap50: float
    ap75: float
    ap_m: float
    ap_l: float

    def to_dict(self) -> dict[str, float | None]:
        return {k: (None if math.isnan(v) else v) for k, v in self.__dict__.items()}


def evaluate_box_ap(
    pred_boxes: Mapping[Any, Sequence[ScoredBox]],
    gt_boxes: Mapping[Any, Sequence[Sequence[float]]],
    max_dets: int = BOX_MAX_DETS,
) -> BoxAPReport:
    """COCO box AP over IoU 0.50:0.05:0.95, plus AP50, AP75 and the medium/large slices."""
    thresholds = OKS_THRESHOLDS

    def run(area_rng: tuple[float, float]) -> np.ndarray:
        lo, hi = area_rng
        evals = []
        for image_id, gts in gt_boxes.items():
            gts = [tuple(map(float, g)) for g in gts]
            dts = _sorted_dets(list(pred_boxes.get(image_id, ())), max_dets)
            g_area = np.array([g[2] * g[3] for g in gts])
            gt_ignore = (g_area < lo) | (g_area > hi)
            d_area = np.array([d.area for d in dts])
            dt_outside = (d_area < lo) | (d_area > hi)
            dt_match, dt_ignore = match_image(_iou_matrix(dts, gts), thresholds, gt_ignore, dt_outside)
            evals.append(_ImageEval(
                np.array([d.score for d in dts], dtype=np.float64), dt_match, dt_ignore, int((~gt_ignore).sum())
            ))
        precision, _ = _accumulate(evals, len(thresholds))
        return precision

    def mean(p: np.ndarray) -> float:
        return math.nan if np.isnan(p).all() else float(np.nanmean(p))

    p_all = run(AREA_RANGES["all"])
    return BoxAPReport(
        ap=mean(p_all),
        ap50=mean(p_all[0]),
        ap75=mean(p_all[5]),
        ap_m=mean(run(AREA_RANGES["medium"])),
        ap_l=mean(run(AREA_RANGES["large"])),
    )


def gt_face_boxes(gts: Mapping[Any, Sequence[WholeBodyAnnotation]]) -> dict[Any, list[tuple[float, float, float, float]]]:
    return {
        image_id: [a.part_box(Anchor.FACE).xywh for a in anns if a.part_box(Anchor.FACE).valid]
        for image_id, anns in gts.items()
    }


# ---------------------------------------------------------------------------
# Results JSON: [{image_id, score, box: [x, y, w, h], keypoints_133: [x, y, s] * 133}]


def results_to_json(results: Mapping[Any, Sequence[DecodedPerson]]) -> list[dict[str, Any]]:
    out = []
    for image_id, persons in results.items():
        for p in persons:
            out.append({
                "image_id": image_id,
                "score": float(p.score),
                "box": [float(v) for v in p.box.xywh],
                "keypoints_133": [float(v) for v in p.keypoints.ravel()],
            })
    return out


def results_from_json(records: Sequence[Mapping[str, Any]]) -> dict[Any, list[DecodedPerson]]:
    out: dict[Any, list[DecodedPerson]] = {}
    for i, r in enumerate(records):
        try:
            kps = np.asarray(r["keypoints_133"], dtype=np.float64).reshape(NUM_KEYPOINTS, 3)
            person = DecodedPerson(
                score=float(r["score"]),
                box=PersonBox.from_xywh(r["box"]),
                keypoints=kps,
                sources=np.full(NUM_KEYPOINTS, "", dtype="<U9"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"result record {i}: {exc}") from exc
        out.setdefault(r["image_id"], []).append(person)
    return out
