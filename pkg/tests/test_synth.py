import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierpose.decoder import decode_people
from hierpose.encoder import encode_targets
from hierpose.errors import SceneGenerationError
from hierpose.layout import FACE, FOOT, LEFT_FOOT, RIGHT_FOOT, Anchor, HierarchyScheme
from hierpose.losses import total_loss
from hierpose.synth import (
    NoiseSpec,
    SceneSpec,
    evidence_maps,
    generate_scene,
    generate_scene_with_truth,
    perfect_maps,
    perturb_maps,
)


def test_scene_deterministic():
    a = generate_scene(SceneSpec(seed=5, n_persons=4))
    b = generate_scene(SceneSpec(seed=5, n_persons=4))
    assert a == b
    assert a != generate_scene(SceneSpec(seed=6, n_persons=4))


def test_scene_inside_image(scene):
    for ann in scene:
        xy = ann.keypoints[:, :2]
        assert (xy >= 0).all() and (xy < 512).all()
        assert ann.image_id == 11


def test_no_missing_feet_by_default(scene):
    for ann in scene:
        assert ann.labeled[LEFT_FOOT.start:LEFT_FOOT.stop].sum() == 3
        assert ann.labeled[RIGHT_FOOT.start:RIGHT_FOOT.stop].sum() == 3
        assert ann.labeled.all()


def test_missing_foot_rate():
    incomplete = total = 0
    seed = 0
    while total < 400:
        for ann in generate_scene(SceneSpec(seed=seed, n_persons=4, missing_foot_rate=0.25)):
            for foot in (LEFT_FOOT, RIGHT_FOOT):
                n = ann.labeled[foot.start:foot.stop].sum()
                assert n >= 1  # one or two labels dropped, never all three
                incomplete += n < 3
                total += 1
        seed += 1
    assert 0.20 <= incomplete / total <= 0.30


def test_truth_keeps_dropped_coordinates():
    anns, complete = generate_scene_with_truth(SceneSpec(seed=2, n_persons=5, missing_foot_rate=1.0))
    for ann, pose in zip(anns, complete):
        lab = ann.labeled
        assert np.array_equal(pose[lab], ann.keypoints[lab, :2])
        assert not lab[FOOT.start:FOOT.stop].all()


def test_impossible_scene_raises():
    with pytest.raises(SceneGenerationError, match="taller than"):
        generate_scene(SceneSpec(image_size=64, max_attempts=20))
    # Person centres alone fill a 4x4 cell grid quickly.
    with pytest.raises(SceneGenerationError, match="collision"):
        generate_scene(SceneSpec(image_size=16, n_persons=40, scale_range=(4.0, 8.0), max_attempts=50))


@pytest.mark.parametrize("scheme", list(HierarchyScheme))
def test_perfect_maps_peaks_and_loss(scene, scheme):
    maps = perfect_maps(scene, scheme)
    assert maps.person_center_heatmap.max() == 1.0
    assert set(np.unique(maps.body_kp_heatmaps)) <= {0.0, 1.0}
    assert total_loss(maps, encode_targets(scene, scheme)).total < 1e-4


def test_evidence_maps_equal_perfect_without_missing(scene):
    anns, complete = generate_scene_with_truth(SceneSpec(seed=11, n_persons=4))
    a, b = evidence_maps(anns, complete, "hm1"), perfect_maps(anns, "hm1")
    for name, arr in a.tensors().items():
        assert np.array_equal(arr, b.tensors()[name]), name


def test_evidence_maps_move_incomplete_foot_centres():
    anns, complete = generate_scene_with_truth(SceneSpec(seed=4, n_persons=3, missing_foot_rate=1.0))
    people = decode_people(evidence_maps(anns, complete, "hm1"))
    assert len(people) == 3
    hm2 = decode_people(evidence_maps(anns, complete, "hm2"))
    for ann in anns:
        lab = np.flatnonzero(ann.labeled[FOOT.start:FOOT.stop]) + FOOT.start
        p1 = min(people, key=lambda p: np.hypot(*np.subtract(p.box.center, ann.person_box.center)))
        p2 = min(hm2, key=lambda p: np.hypot(*np.subtract(p.box.center, ann.person_box.center)))
        # Foot keypoints come straight from the person centre under HM2.
        assert np.abs(p2.keypoints[lab, :2] - ann.keypoints[lab, :2]).max() < 1e-3
        assert np.abs(p1.keypoints[lab, :2] - ann.keypoints[lab, :2]).max() > 1e-3


def test_zero_noise_is_identity(scene):
    maps = perfect_maps(scene, "hm2")
    assert perturb_maps(maps, NoiseSpec(), seed=3) is maps
    assert NoiseSpec(heatmap_jitter={"face": 0.0}).is_zero


def test_noise_same_seed_same_output(scene):
    maps = perfect_maps(scene, "hm2")
    noise = NoiseSpec(0.05, {"face": 1.0, "hand": 1.0})
    a, b = perturb_maps(maps, noise, seed=1), perturb_maps(maps, noise, seed=1)
    c = perturb_maps(maps, noise, seed=2)
    for name in a.tensors():
        assert np.array_equal(a.tensors()[name], b.tensors()[name])
    assert not np.array_equal(a.face_kp_offsets, c.face_kp_offsets)


def test_noise_spares_zero_offsets(scene):
    maps = perfect_maps(scene, "hm2")
    noisy = perturb_maps(maps, NoiseSpec(0.1), seed=0)
    zero = maps.face_kp_offsets == 0
    assert (noisy.face_kp_offsets[zero] == 0).all()
    assert np.array_equal(noisy.body_kp_heatmaps, maps.body_kp_heatmaps)


def test_noise_scales_linearly(scene):
    maps = perfect_maps(scene, "hm2")
    d1 = perturb_maps(maps, NoiseSpec(0.01), seed=0).face_kp_offsets - maps.face_kp_offsets
    d2 = perturb_maps(maps, NoiseSpec(0.02), seed=0).face_kp_offsets - maps.face_kp_offsets
    assert np.allclose(d2, 2 * d1, atol=1e-4)


def test_part_multiplier(scene):
    maps = perfect_maps(scene, "hm2")
    off = perturb_maps(maps, NoiseSpec(0.05, part_multipliers={"face": 0.0}), seed=0)
    assert np.array_equal(off.face_kp_offsets, maps.face_kp_offsets)
    assert not np.array_equal(off.hand_kp_offsets, maps.hand_kp_offsets)


def face_offset_noise(scene, scheme, seed):
    maps = perfect_maps(scene, scheme)
    noisy = perturb_maps(maps, NoiseSpec(0.05), seed=seed)
    if scheme is HierarchyScheme.BASELINE:
        sl = slice(2 * FACE.start, 2 * FACE.stop)
        return np.abs(noisy.body_kp_offsets[..., sl] - maps.body_kp_offsets[..., sl]).mean(axis=-1).sum()
    return np.abs(noisy.face_kp_offsets - maps.face_kp_offsets).mean(axis=-1).sum()


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 500))
def test_face_noise_larger_under_baseline(seed):
    scene = generate_scene(SceneSpec(seed=seed, n_persons=2))
    assert face_offset_noise(scene, HierarchyScheme.BASELINE, seed) >= face_offset_noise(scene, HierarchyScheme.HM2, seed)


def test_jitter_moves_only_selected_parts(scene):
    maps = perfect_maps(scene, "hm1")
    noisy = perturb_maps(maps, NoiseSpec(heatmap_jitter={"center": 2.0}), seed=0)
    n_body = 17
    assert np.array_equal(noisy.body_kp_heatmaps[..., :n_body], maps.body_kp_heatmaps[..., :n_body])
    assert not np.array_equal(noisy.body_kp_heatmaps[..., n_body:], maps.body_kp_heatmaps[..., n_body:])
    # Each part-offset block still sits under its (moved) centre peak.
    face_ch = n_body + [a for a in HierarchyScheme.HM1.body_centers].index(Anchor.FACE)
    peaks = np.argwhere(noisy.body_kp_heatmaps[..., face_ch] == 1.0)
    blocks = np.argwhere(np.abs(noisy.face_kp_offsets).sum(-1) > 0)
    assert {tuple(p) for p in peaks} == {tuple(b) for b in blocks}


@pytest.mark.parametrize("scheme", list(HierarchyScheme))
def test_noise_free_decode_scheme_independent(scheme):
    scene = generate_scene(SceneSpec(seed=21, n_persons=5, missing_foot_rate=0.5))
    people = decode_people(perfect_maps(scene, scheme))
    for ann in scene:
        p = min(people, key=lambda q: np.hypot(*np.subtract(q.box.center, ann.person_box.center)))
        assert np.abs(p.keypoints[ann.labeled, :2] - ann.keypoints[ann.labeled, :2]).max() < 1e-3
