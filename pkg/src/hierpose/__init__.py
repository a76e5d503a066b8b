"""Hierarchical whole-body pose: target encoding, losses, grouping and evaluation."""

from .decoder import DecodedPerson, decode_people, extract_peaks, match_regressed_detected
from .encoder import encode_targets, gaussian_radius, render_gaussian
from .errors import AnnotationError, ContractError, HierPoseError, SceneGenerationError, TensorFormatError
from .evaluator import (
    EvalReport,
    evaluate_box_ap,
    evaluate_keypoint_ap,
    evaluate_wholebody,
    face_boxes_from_keypoints,
    load_sigmas,
    oks,
)
from .layout import (
    Anchor,
    HierarchyScheme,
    PartBox,
    PersonBox,
    WholeBodyAnnotation,
    anchor_of,
    derive_part_boxes,
    load_dataset,
)
from .losses import focal_loss, offset_l1_loss, size_l1_loss, total_loss
from .maps import PredictionMaps, TargetMaps, load_maps, save_maps
from .synth import NoiseSpec, SceneSpec, generate_scene, perfect_maps, perturb_maps

__version__ = "0.1.0"

__all__ = [
    "AnnotationError", "Anchor", "ContractError", "DecodedPerson", "EvalReport", "HierPoseError",
    "HierarchyScheme", "NoiseSpec", "PartBox", "PersonBox", "PredictionMaps", "SceneGenerationError",
    "SceneSpec", "TargetMaps", "TensorFormatError", "WholeBodyAnnotation", "anchor_of", "decode_people",
    "derive_part_boxes", "encode_targets", "evaluate_box_ap", "evaluate_keypoint_ap", "evaluate_wholebody",
    "extract_peaks", "face_boxes_from_keypoints", "focal_loss", "gaussian_radius", "generate_scene",
    "load_dataset", "load_maps", "load_sigmas", "match_regressed_detected", "offset_l1_loss", "oks",
    "perfect_maps", "perturb_maps", "render_gaussian", "save_maps", "size_l1_loss", "total_loss",
]
