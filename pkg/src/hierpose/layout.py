"""Whole-body keypoint layout, annotations and hierarchy schemes.

The 133-keypoint layout follows COCO-WholeBody ordering::

    body        0-16   (17)
    left foot   17-19  (3)   big toe, small toe, heel
    right foot  20-22  (3)
    face        23-90  (68)
    left hand   91-111 (21)
    right hand  112-132 (21)

Everything here is geometry and metadata; no pixels are read.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Iterable, Mapping, NamedTuple

import numpy as np

from .errors import AnnotationError, ContractError

NUM_KEYPOINTS = 133

BODY = range(0, 17)
LEFT_FOOT = range(17, 20)
RIGHT_FOOT = range(20, 23)
FOOT = range(17, 23)
FACE = range(23, 91)
LEFT_HAND = range(91, 112)
RIGHT_HAND = range(112, 133)
HAND = range(91, 133)
WHOLE_BODY = range(0, 133)

# Evaluation parts, in report column order.
PARTS: Mapping[str, range] = MappingProxyType({
    "body": BODY,
    "foot": FOOT,
    "face": FACE,
    "hand": HAND,
    "whole-body": WHOLE_BODY,
})

# Split-form JSON field name -> slice of the 133 layout.
SPLIT_FIELDS: tuple[tuple[str, range], ...] = (
    ("keypoints", BODY),
    ("foot_kpts", FOOT),
    ("face_kpts", FACE),
    ("lefthand_kpts", LEFT_HAND),
    ("righthand_kpts", RIGHT_HAND),
)


class Anchor(str, Enum):
    """Reference point a keypoint offset is regressed from."""

    PERSON = "person"
    FACE = "face"
    LHAND = "left_hand"
    RHAND = "right_hand"
    LFOOT = "left_foot"
    RFOOT = "right_foot"


# Keypoint ranges spanned by each part box.
PART_RANGES: Mapping[Anchor, range] = MappingProxyType({
    Anchor.FACE: FACE,
    Anchor.LHAND: LEFT_HAND,
    Anchor.RHAND: RIGHT_HAND,
    Anchor.LFOOT: LEFT_FOOT,
    Anchor.RFOOT: RIGHT_FOOT,
})

PART_ANCHORS: tuple[Anchor, ...] = tuple(PART_RANGES)


def part_name(k: int) -> str:
    """Coarse part label of keypoint ``k`` (``body``, ``foot``, ``face`` or ``hand``)."""
    if not 0 <= k < NUM_KEYPOINTS:
        raise ContractError(f"keypoint index {k} outside 0..{NUM_KEYPOINTS - 1}")
    for name in ("body", "foot", "face", "hand"):
        if k in PARTS[name]:
            return name
    raise AssertionError("unreachable")


class Keypoint(NamedTuple):
    x: float
    y: float
    v: int  # 0 unlabeled, 1 labeled occluded, 2 labeled visible


@dataclass(frozen=True)
class PersonBox:
    center: tuple[float, float]
    width: float
    height: float

    @classmethod
    def from_xywh(cls, xywh: Iterable[float]) -> "PersonBox":
        x, y, w, h = (float(v) for v in xywh)
        return cls((x + w / 2.0, y + h / 2.0), w, h)

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return (cx - self.width / 2.0, cy - self.height / 2.0, self.width, self.height)

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class PartBox:
    center: tuple[float, float]
    width: float
    height: float
    valid: bool

    @classmethod
    def from_keypoints(cls, kps: np.ndarray, padding: float = 0.0) -> "PartBox":
        """Tight hull over the labeled rows of an (n, 3) keypoint array.

        ``padding`` grows each side by that fraction of the hull size.
        """
        labeled = kps[kps[:, 2] > 0]
        if len(labeled) == 0:
            return cls.INVALID
        x0, y0 = labeled[:, 0].min(), labeled[:, 1].min()
        x1, y1 = labeled[:, 0].max(), labeled[:, 1].max()
        w, h = x1 - x0, y1 - y0
        return cls(
            (float((x0 + x1) / 2.0), float((y0 + y1) / 2.0)),
            float(w * (1.0 + 2.0 * padding)),
            float(h * (1.0 + 2.0 * padding)),
            True,
        )

    @classmethod
    def from_xywh(cls, xywh: Iterable[float], valid: bool = True) -> "PartBox":
        x, y, w, h = (float(v) for v in xywh)
        if not valid or (w <= 0 and h <= 0 and x == 0 and y == 0):
            return cls.INVALID
        return cls((x + w / 2.0, y + h / 2.0), w, h, True)

    @property
    def xywh(self) -> tuple[float, float, float, float]:
        cx, cy = self.center
        return (cx - self.width / 2.0, cy - self.height / 2.0, self.width, self.height)


PartBox.INVALID = PartBox((0.0, 0.0), 0.0, 0.0, False)  # type: ignore[attr-defined]


@dataclass(frozen=True, eq=False)
class WholeBodyAnnotation:
    """One person's 133 keypoints plus person and part boxes.

    ``keypoints`` is a read-only (133, 3) float array of ``(x, y, v)`` rows in
    input-image pixels. Rows with ``v == 0`` carry no coordinates.
    """

    keypoints: np.ndarray
    person_box: PersonBox
    part_boxes: Mapping[Anchor, PartBox] = field(default_factory=dict)
    image_id: Any = 0

    def __post_init__(self) -> None:
        kps = np.array(self.keypoints, dtype=np.float64)
        if kps.shape != (NUM_KEYPOINTS, 3):
            raise AnnotationError(
                f"image_id={self.image_id!r}: expected {NUM_KEYPOINTS}x3 keypoints, "
                f"got shape {kps.shape}"
            )
        vis = kps[:, 2]
        if not np.isin(vis, (0, 1, 2)).all():
            raise AnnotationError(f"image_id={self.image_id!r}: visibility flags must be 0, 1 or 2")
        kps[vis == 0, :2] = 0.0
        kps.setflags(write=False)
        if not (self.person_box.width > 0 and self.person_box.height > 0):
            raise AnnotationError(f"image_id={self.image_id!r}: person box must have positive size")
        object.__setattr__(self, "keypoints", kps)
        object.__setattr__(self, "part_boxes", MappingProxyType(dict(self.part_boxes)))

    def keypoint(self, k: int) -> Keypoint:
        x, y, v = self.keypoints[k]
        return Keypoint(float(x), float(y), int(v))

    @property
    def labeled(self) -> np.ndarray:
        return self.keypoints[:, 2] > 0

    def part_box(self, anchor: Anchor) -> PartBox:
        return self.part_boxes.get(anchor, PartBox.INVALID)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, WholeBodyAnnotation):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.person_box == other.person_box
            and dict(self.part_boxes) == dict(other.part_boxes)
            and np.array_equal(self.keypoints, other.keypoints)
        )

    __hash__ = None  # type: ignore[assignment]


def derive_part_boxes(annotation: WholeBodyAnnotation, padding: float = 0.0) -> WholeBodyAnnotation:
    """Fill part boxes from the extreme labeled keypoints of each part.

    Parts without any labeled keypoint get ``valid=False``. A part with a single
    labeled keypoint gets a zero-area but valid box centred on it.
    """
    kps = annotation.keypoints
    boxes = {a: PartBox.from_keypoints(kps[r.start:r.stop], padding) for a, r in PART_RANGES.items()}
    return replace(annotation, part_boxes=boxes)


class HierarchyScheme(str, Enum):
    """Assignment of keypoints to regression anchors.

    * ``BASELINE``: every keypoint regressed from the person centre.
    * ``HM1``: body keypoints and the five part centres from the person centre;
      face, hand and foot keypoints from their own part centre.
    * ``HM2``: like ``HM1`` but the six foot keypoints are regressed from the
      person centre and there are no foot centres.
    """

    BASELINE = "baseline"
    HM1 = "hm1"
    HM2 = "hm2"

    @classmethod
    def parse(cls, value: "str | HierarchyScheme") -> "HierarchyScheme":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "").replace("_", ""))
        except ValueError:
            raise ContractError(f"unknown hierarchy scheme {value!r}") from None

    @property
    def body_direct(self) -> tuple[int, ...]:
        """Keypoint indices regressed directly from the person centre, in channel order."""
        return _BODY_DIRECT[self]

    @property
    def body_centers(self) -> tuple[Anchor, ...]:
        """Part-centre pseudo-keypoints appended after ``body_direct`` in the body branch."""
        return _BODY_CENTERS[self]

    @property
    def body_channels(self) -> int:
        return len(self.body_direct) + len(self.body_centers)

    @property
    def part_anchors(self) -> tuple[Anchor, ...]:
        """Part anchors whose keypoints are regressed from the part centre."""
        return self.body_centers


_BODY_DIRECT = {
    HierarchyScheme.BASELINE: tuple(range(NUM_KEYPOINTS)),
    HierarchyScheme.HM1: tuple(BODY),
    HierarchyScheme.HM2: tuple(BODY) + tuple(FOOT),
}
_BODY_CENTERS = {
    HierarchyScheme.BASELINE: (),
    HierarchyScheme.HM1: (Anchor.FACE, Anchor.LHAND, Anchor.RHAND, Anchor.LFOOT, Anchor.RFOOT),
    HierarchyScheme.HM2: (Anchor.FACE, Anchor.LHAND, Anchor.RHAND),
}


def anchor_of(scheme: HierarchyScheme | str, k: int) -> Anchor:
    """Anchor that keypoint ``k`` is regressed from under ``scheme``."""
    scheme = HierarchyScheme.parse(scheme)
    if not 0 <= k < NUM_KEYPOINTS:
        raise ContractError(f"keypoint index {k} outside 0..{NUM_KEYPOINTS - 1}")
    for anchor in scheme.part_anchors:
        if k in PART_RANGES[anchor]:
            return anchor
    return Anchor.PERSON


# ---------------------------------------------------------------------------
# JSON I/O


def _triplets(values: Any, expected: int, where: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.size != expected * 3:
        raise AnnotationError(f"{where}: expected {expected * 3} numbers, got {arr.size}")
    return arr.reshape(expected, 3)


def annotation_from_record(
    record: Mapping[str, Any],
    form: str = "auto",
    use_shipped_boxes: bool = False,
    where: str = "record",
) -> WholeBodyAnnotation:
    """Build an annotation from one split- or flat-form JSON person record."""
    image_id = record.get("image_id", 0)
    where = f"{where} (image_id={image_id!r})"
    if form == "auto":
        form = "flat" if "keypoints_133" in record else "split"
    try:
        if form == "flat":
            kps = _triplets(record["keypoints_133"], NUM_KEYPOINTS, f"{where} keypoints_133")
        elif form == "split":
            kps = np.zeros((NUM_KEYPOINTS, 3))
            for name, r in SPLIT_FIELDS:
                if name not in record:
                    raise AnnotationError(f"{where}: missing field {name!r}")
                kps[r.start:r.stop] = _triplets(record[name], len(r), f"{where} {name}")
        else:
            raise ContractError(f"unknown annotation format {form!r}")
        if "bbox" not in record:
            raise AnnotationError(f"{where}: missing field 'bbox'")
        person_box = PersonBox.from_xywh(record["bbox"])
    except (TypeError, ValueError) as exc:
        if isinstance(exc, AnnotationError):
            raise
        raise AnnotationError(f"{where}: {exc}") from exc

    ann = derive_part_boxes(WholeBodyAnnotation(kps, person_box, image_id=image_id))
    if use_shipped_boxes:
        boxes = dict(ann.part_boxes)
        for anchor, key in ((Anchor.FACE, "face"), (Anchor.LHAND, "lefthand"), (Anchor.RHAND, "righthand")):
            if f"{key}_box" in record:
                boxes[anchor] = PartBox.from_xywh(record[f"{key}_box"], bool(record.get(f"{key}_valid", True)))
        ann = replace(ann, part_boxes=boxes)
    return ann


def annotation_to_record(ann: WholeBodyAnnotation, form: str = "split") -> dict[str, Any]:
    kps = ann.keypoints
    record: dict[str, Any] = {"image_id": ann.image_id, "bbox": [float(v) for v in ann.person_box.xywh]}
    if form == "flat":
        record["keypoints_133"] = [float(v) for v in kps.ravel()]
    else:
        for name, r in SPLIT_FIELDS:
            record[name] = [float(v) for v in kps[r.start:r.stop].ravel()]
    return record


def load_dataset(
    path: str | Path,
    format: str = "auto",
    use_shipped_boxes: bool = False,
) -> dict[Any, list[WholeBodyAnnotation]]:
    """Read an annotation JSON file into per-image annotation lists.

    The file holds either a list of person records or an object with an
    ``annotations`` list (COCO style). ``format`` is ``"split"``, ``"flat"`` or
    ``"auto"`` (decided per record). Images listed under ``images`` without any
    person still appear with an empty list.
    """
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc

    if isinstance(data, Mapping):
        records = data.get("annotations")
        images = data.get("images", [])
    else:
        records, images = data, []
    if not isinstance(records, list):
        raise AnnotationError(f"{path}: expected a list of person records")

    out: dict[Any, list[WholeBodyAnnotation]] = {img["id"]: [] for img in images if isinstance(img, Mapping) and "id" in img}
    for i, record in enumerate(records):
        if not isinstance(record, Mapping):
            raise AnnotationError(f"{path}: record {i} is not an object")
        ann = annotation_from_record(record, format, use_shipped_boxes, where=f"{path.name} record {i}")
        out.setdefault(ann.image_id, []).append(ann)
    return out


def dump_dataset(
    groups: Mapping[Any, list[WholeBodyAnnotation]],
    path: str | Path,
    form: str = "split",
    image_size: tuple[int, int] | None = None,
) -> None:
    images = []
    for image_id in groups:
        entry: dict[str, Any] = {"id": image_id}
        if image_size is not None:
            entry["width"], entry["height"] = image_size
        images.append(entry)
    # The group key is authoritative for the image a record belongs to.
    records = [{**annotation_to_record(a, form), "image_id": image_id} for image_id, anns in groups.items() for a in anns]
    Path(path).write_text(json.dumps({"images": images, "annotations": records}, indent=1))
