"""Branch tensor containers and the ``HPRT`` binary tensor dump.

All spatial tensors are laid out ``(H, W)`` or ``(H, W, C)``; offsets and sizes
are in output-map cells (input pixels divided by the stride). Offset channels
interleave ``x, y`` per keypoint.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Mapping

import numpy as np

from .errors import ContractError, TensorFormatError
from .layout import FACE, FOOT, HAND, Anchor, HierarchyScheme

# The eight network branches, in the order the heads are usually listed.
BRANCHES: tuple[str, ...] = (
    "person_center_heatmap",
    "person_center_offset",
    "person_wh",
    "body_kp_offsets",
    "body_kp_heatmaps",
    "hand_kp_offsets",
    "face_kp_offsets",
    "face_box_wh",
)
# Only populated under HM1, where foot keypoints hang off the foot centres.
FOOT_BRANCH = "foot_kp_offsets"
ALL_BRANCHES = BRANCHES + (FOOT_BRANCH,)

HEATMAP_BRANCHES = ("person_center_heatmap", "body_kp_heatmaps")
OFFSET_BRANCHES = ("person_center_offset", "body_kp_offsets", "hand_kp_offsets", "face_kp_offsets", FOOT_BRANCH)
SIZE_BRANCHES = ("person_wh", "face_box_wh")
REGRESSION_BRANCHES = OFFSET_BRANCHES + SIZE_BRANCHES

# Part-anchored offset tensors: anchor -> (branch, first channel pair).
PART_SLOTS: Mapping[Anchor, tuple[str, int]] = {
    Anchor.FACE: ("face_kp_offsets", 0),
    Anchor.LHAND: ("hand_kp_offsets", 0),
    Anchor.RHAND: ("hand_kp_offsets", 21),
    Anchor.LFOOT: (FOOT_BRANCH, 0),
    Anchor.RFOOT: (FOOT_BRANCH, 3),
}


def channel_counts(scheme: HierarchyScheme | str) -> dict[str, int]:
    """Last-axis size of every branch under ``scheme`` (heatmap of persons is 2-D: 1)."""
    scheme = HierarchyScheme.parse(scheme)
    parts = scheme.part_anchors
    b = scheme.body_channels
    return {
        "person_center_heatmap": 1,
        "person_center_offset": 2,
        "person_wh": 2,
        "body_kp_offsets": 2 * b,
        "body_kp_heatmaps": b,
        "hand_kp_offsets": 2 * len(HAND) if Anchor.LHAND in parts else 0,
        "face_kp_offsets": 2 * len(FACE) if Anchor.FACE in parts else 0,
        "face_box_wh": 2,
        FOOT_BRANCH: 2 * len(FOOT) if Anchor.LFOOT in parts else 0,
    }


def empty_tensors(scheme: HierarchyScheme, height: int, width: int, dtype=np.float32) -> dict[str, np.ndarray]:
    out = {}
    for name, c in channel_counts(scheme).items():
        shape = (height, width) if name == "person_center_heatmap" else (height, width, c)
        out[name] = np.zeros(shape, dtype=dtype)
    return out


@dataclass(frozen=True)
class PredictionMaps:
    """The branch outputs for one image (or, as ``TargetMaps``, their targets)."""

    person_center_heatmap: np.ndarray
    person_center_offset: np.ndarray
    person_wh: np.ndarray
    body_kp_offsets: np.ndarray
    body_kp_heatmaps: np.ndarray
    hand_kp_offsets: np.ndarray
    face_kp_offsets: np.ndarray
    face_box_wh: np.ndarray
    foot_kp_offsets: np.ndarray
    scheme: HierarchyScheme
    stride: int

    @property
    def size(self) -> tuple[int, int]:
        """Map ``(height, width)``."""
        h, w = self.person_center_heatmap.shape
        return h, w

    def tensors(self, include_empty: bool = True) -> dict[str, np.ndarray]:
        out = {name: getattr(self, name) for name in ALL_BRANCHES}
        if not include_empty:
            out = {k: v for k, v in out.items() if v.size}
        return out

    def channel_counts(self) -> dict[str, int]:
        return {
            name: 1 if t.ndim == 2 else t.shape[-1]
            for name, t in self.tensors().items()
        }

    def validate(self) -> None:
        """Raise ``ContractError`` unless every branch matches the scheme layout."""
        h, w = self.size
        expected = channel_counts(self.scheme)
        for name, t in self.tensors().items():
            shape = (h, w) if name == "person_center_heatmap" else (h, w, expected[name])
            if t.shape != shape:
                raise ContractError(
                    f"{name}: shape {t.shape} does not match {shape} for scheme {self.scheme.value}"
                )
        for name in HEATMAP_BRANCHES:
            t = getattr(self, name)
            if t.size and not (np.nanmin(t) >= 0.0 and np.nanmax(t) <= 1.0):
                raise ContractError(f"{name}: values must lie in [0, 1]")

    def with_tensors(self, **tensors: np.ndarray) -> "PredictionMaps":
        return replace(self, **tensors)

    def as_prediction(self) -> "PredictionMaps":
        return PredictionMaps(**{n: getattr(self, n) for n in ALL_BRANCHES}, scheme=self.scheme, stride=self.stride)


@dataclass
class EncodeDiagnostics:
    out_of_bounds_keypoints: int = 0
    out_of_bounds_persons: int = 0
    invalid_part_keypoints: int = 0
    collisions: int = 0
    encoded_pairs: int = 0
    gaussians_skipped: int = 0


@dataclass(frozen=True)
class TargetMaps(PredictionMaps):
    """Targets plus per-channel regression masks (same shape as each tensor)."""

    masks: Mapping[str, np.ndarray] = field(default_factory=dict)
    diagnostics: EncodeDiagnostics = field(default_factory=EncodeDiagnostics)


def maps_from_tensors(
    tensors: Mapping[str, np.ndarray],
    scheme: HierarchyScheme | str,
    stride: int,
) -> PredictionMaps | TargetMaps:
    """Rebuild maps from a flat name -> array mapping (as read from a dump)."""
    scheme = HierarchyScheme.parse(scheme)
    missing = [n for n in BRANCHES if n not in tensors]
    if missing:
        raise ContractError(f"missing branch tensors: {', '.join(missing)}")
    base = {n: np.asarray(tensors[n], dtype=np.float32) for n in BRANCHES}
    h, w = base["person_center_heatmap"].shape[:2]
    base[FOOT_BRANCH] = np.asarray(
        tensors.get(FOOT_BRANCH, np.zeros((h, w, channel_counts(scheme)[FOOT_BRANCH]), np.float32)),
        dtype=np.float32,
    )
    masks = {n[len("mask/"):]: np.asarray(t) > 0.5 for n, t in tensors.items() if n.startswith("mask/")}
    if masks:
        maps: PredictionMaps = TargetMaps(**base, scheme=scheme, stride=int(stride), masks=masks)
    else:
        maps = PredictionMaps(**base, scheme=scheme, stride=int(stride))
    maps.validate()
    return maps


# ---------------------------------------------------------------------------
# HPRT binary dump: magic, u16 version, u16 count, then per tensor
# u8 name length, name, u8 rank, u32 dims, f32 payload (little-endian, row-major).

MAGIC = b"HPRT"
FORMAT_VERSION = 1
_SCHEME_CODES = {HierarchyScheme.BASELINE: 0, HierarchyScheme.HM1: 1, HierarchyScheme.HM2: 2}


def write_tensors(stream: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    if len(tensors) > 0xFFFF:
        raise TensorFormatError("too many tensors for one dump")
    stream.write(MAGIC + struct.pack("<HH", FORMAT_VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFF:
            raise TensorFormatError(f"tensor name too long: {name!r}")
        arr = np.asarray(arr, dtype="<f4")
        if arr.ndim > 0xFF:
            raise TensorFormatError(f"{name}: rank {arr.ndim} too large")
        stream.write(struct.pack("<B", len(raw)) + raw + struct.pack("<B", arr.ndim))
        stream.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        stream.write(arr.tobytes(order="C"))


def read_tensors(stream: BinaryIO) -> dict[str, np.ndarray]:
    def take(n: int) -> bytes:
        chunk = stream.read(n)
        if len(chunk) != n:
            raise TensorFormatError("truncated tensor dump")
        return chunk

    if take(4) != MAGIC:
        raise TensorFormatError("not an HPRT tensor dump (bad magic)")
    version, count = struct.unpack("<HH", take(4))
    if version != FORMAT_VERSION:
        raise TensorFormatError(f"unsupported HPRT version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<B", take(1))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank)) if rank else ()
        n = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    return out


def save_maps(path: str | Path, maps: PredictionMaps, meta: Mapping[str, float] | None = None) -> None:
    """Write maps (and masks, for targets) plus ``meta/`` scalars to ``path``.

    ``meta`` adds numeric scalars such as ``image_id``; values are stored as
    float32, so integers are exact up to 2**24.
    """
    tensors: dict[str, np.ndarray] = {
        "meta/scheme": np.float32(_SCHEME_CODES[maps.scheme]),
        "meta/stride": np.float32(maps.stride),
    }
    for key, value in (meta or {}).items():
        tensors[f"meta/{key}"] = np.float32(value)
    tensors.update(maps.tensors())
    if isinstance(maps, TargetMaps):
        for name, mask in maps.masks.items():
            tensors[f"mask/{name}"] = mask.astype(np.float32)
    with open(path, "wb") as fh:
        write_tensors(fh, tensors)


def read_meta(path: str | Path) -> dict[str, float]:
    """The ``meta/`` scalars of a dump, without the ``meta/`` prefix."""
    with open(path, "rb") as fh:
        tensors = read_tensors(fh)
    return {n[len("meta/"):]: float(t) for n, t in tensors.items() if n.startswith("meta/")}


def load_maps(
    path: str | Path,
    scheme: HierarchyScheme | str | None = None,
    stride: int | None = None,
) -> PredictionMaps | TargetMaps:
    """Read a dump written by ``save_maps``.

    ``scheme`` and ``stride`` fall back to the dump's ``meta/`` entries; when
    both are given and disagree a ``ContractError`` is raised.
    """
    with open(path, "rb") as fh:
        tensors = read_tensors(fh)
    codes = {v: k for k, v in _SCHEME_CODES.items()}
    stored_scheme = codes.get(int(tensors["meta/scheme"])) if "meta/scheme" in tensors else None
    stored_stride = int(tensors["meta/stride"]) if "meta/stride" in tensors else None
    if scheme is not None:
        scheme = HierarchyScheme.parse(scheme)
        if stored_scheme is not None and stored_scheme != scheme:
            raise ContractError(f"{path}: dump holds scheme {stored_scheme.value}, not {scheme.value}")
    scheme = scheme or stored_scheme
    if stride is not None and stored_stride is not None and stored_stride != stride:
        raise ContractError(f"{path}: dump holds stride {stored_stride}, not {stride}")
    stride = stride or stored_stride
    if scheme is None or stride is None:
        raise ContractError(f"{path}: scheme and stride must be given (no meta entries in dump)")
    return maps_from_tensors(tensors, scheme, stride)
