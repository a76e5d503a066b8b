import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hierpose.decoder import (
    DETECTED,
    FALLBACK,
    REGRESSED,
    decode_people,
    extract_peaks,
    match_regressed_detected,
)
from hierpose.encoder import render_gaussian
from hierpose.errors import ContractError
from hierpose.layout import FACE, NUM_KEYPOINTS, HierarchyScheme, PersonBox
from hierpose.maps import PredictionMaps, empty_tensors
from hierpose.synth import SceneSpec, generate_scene, perfect_maps


def nearest(people, ann):
    return min(people, key=lambda p: np.hypot(*np.subtract(p.box.center, ann.person_box.center)))


def test_single_peak():
    hm = render_gaussian(np.zeros((32, 32), np.float32), (10, 10), 3)
    assert extract_peaks(hm, 10, 0.1) == [((10, 10), 1.0)]


def test_equal_peaks_row_major():
    hm = np.zeros((12, 12), np.float32)
    hm[5, 5] = hm[2, 9] = 0.8
    assert extract_peaks(hm, 10, 0.1) == [((2, 9), pytest.approx(0.8)), ((5, 5), pytest.approx(0.8))]


def test_uniform_map_empty():
    assert extract_peaks(np.full((8, 8), 0.3), 5, 0.31) == []


def test_peak_contract():
    with pytest.raises(ContractError):
        extract_peaks(np.zeros((4, 4)), 0, 0.1)
    with pytest.raises(ContractError):
        extract_peaks(np.zeros((4, 4, 1)), 1, 0.1)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.floats(0.0, 0.9))
def test_peaks_match_sort_oracle(seed, k, thr):
    rng = np.random.default_rng(seed)
    # Values on a coarse grid so ties actually happen.
    hm = rng.integers(0, 6, (9, 11)) / 5.0
    got = extract_peaks(hm, k, thr)
    cells = []
    for r in range(9):
        for c in range(11):
            window = hm[max(r - 1, 0):r + 2, max(c - 1, 0):c + 2]
            if hm[r, c] >= thr and hm[r, c] == window.max():
                cells.append((-hm[r, c], r, c))
    want = [((r, c), -s) for s, r, c in sorted(cells)[:k]]
    assert got == want


BOX = PersonBox((40.0, 40.0), 40.0, 40.0)


def test_match_unique_candidate():
    (m,) = match_regressed_detected([(40, 40)], [((41, 40), 0.9)], BOX)
    assert (m.x, m.y, m.score, m.source) == (41, 40, 0.9, DETECTED)


def test_match_outside_box_keeps_regressed():
    box = PersonBox((20.0, 20.0), 40.0, 40.0)  # x in [0, 40]
    (m,) = match_regressed_detected([(40, 40)], [((41, 40), 0.9)], box)
    assert (m.x, m.y, m.source) == (40, 40, REGRESSED)
    (m,) = match_regressed_detected([(40, 40)], [((41, 40), 0.9)], box, margin=0.1)
    assert m.source == DETECTED


def test_match_equidistant_row_major():
    (m,) = match_regressed_detected([(40, 40)], [((41, 40), 0.9), ((39, 40), 0.5)], BOX)
    assert (m.x, m.y) == (39, 40)
    (m,) = match_regressed_detected([(40, 40)], [((40, 41), 0.9), ((40, 39), 0.5)], BOX)
    assert (m.x, m.y) == (40, 39)


def test_match_snap_keeps_subcell():
    (m,) = match_regressed_detected([(40.3, 39.9)], [((40.5, 40.5), 0.9)], BOX, snap=0.5)
    assert (m.x, m.y) == pytest.approx((40.3, 40.0))


def test_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(50):
        reg = rng.uniform(10, 70, (4, 2))
        det = [((float(x), float(y)), 1.0) for x, y in rng.integers(10, 70, (5, 2))]
        out = match_regressed_detected(reg, det, BOX)
        for p, m in zip(reg, out):
            inside = [d for d, _ in det if 20 <= d[0] <= 60 and 20 <= d[1] <= 60]
            if not inside:
                assert m.source == REGRESSED
                continue
            best = min(inside, key=lambda d: (np.hypot(d[0] - p[0], d[1] - p[1]), d[1], d[0]))
            assert (m.x, m.y) == best


def _assert_round_trip(scene, people, tol=1e-3):
    assert len(people) == len(scene)
    for ann in scene:
        p = nearest(people, ann)
        lab = ann.labeled
        assert np.abs(p.keypoints[lab, :2] - ann.keypoints[lab, :2]).max() <= tol
        assert np.abs(np.subtract(p.box.center, ann.person_box.center)).max() <= tol
        assert abs(p.box.width - ann.person_box.width) <= tol
        assert abs(p.box.height - ann.person_box.height) <= tol


@pytest.mark.parametrize("scheme", list(HierarchyScheme))
def test_round_trip_all_schemes(scheme):
    for seed in range(5):
        scene = generate_scene(SceneSpec(seed=seed, n_persons=1 + 2 * seed, missing_foot_rate=0.3))
        _assert_round_trip(scene, decode_people(perfect_maps(scene, scheme)))


def test_schemes_recover_same_pose(scene):
    decoded = [decode_people(perfect_maps(scene, s)) for s in HierarchyScheme]
    for ann in scene:
        pts = [nearest(d, ann).keypoints[ann.labeled, :2] for d in decoded]
        assert np.abs(pts[0] - pts[1]).max() < 1e-3 and np.abs(pts[0] - pts[2]).max() < 1e-3


def test_sources_and_scores(scene):
    people = decode_people(perfect_maps(scene, "hm2"))
    for p in people:
        assert p.keypoints.shape == (NUM_KEYPOINTS, 3)
        assert set(p.sources[:23]) == {DETECTED}
        assert set(p.sources[23:]) == {REGRESSED}
        assert (0 <= p.keypoints[:, 2]).all() and (p.keypoints[:, 2] <= 1).all()
        x0, y0, w, h = p.box.xywh
        det = p.keypoints[p.sources == DETECTED]
        assert ((det[:, 0] >= x0 - 1e-6) & (det[:, 0] <= x0 + w + 1e-6)).all()
        assert ((det[:, 1] >= y0 - 1e-6) & (det[:, 1] <= y0 + h + 1e-6)).all()


def test_face_center_suppressed_uses_fallback(scene):
    maps = perfect_maps(scene, "hm2")
    hm = maps.body_kp_heatmaps.copy()
    hm[:, :, 23] = 0.0  # face-centre channel
    people = decode_people(maps.with_tensors(body_kp_heatmaps=hm))
    for ann in scene:
        p = nearest(people, ann)
        assert set(p.sources[FACE.start:FACE.stop]) == {FALLBACK}
        assert p.keypoints[FACE.start, 2] == pytest.approx(0.5 * p.score)
        # Regressed face centre lands in the same cell, so keypoints survive.
        lab = ann.labeled[FACE.start:FACE.stop]
        err = np.abs(p.keypoints[FACE.start:FACE.stop][lab, :2] - ann.keypoints[FACE.start:FACE.stop][lab, :2])
        assert err.max() <= 1e-3


def test_empty_maps():
    t = empty_tensors(HierarchyScheme.HM2, 32, 32)
    assert decode_people(PredictionMaps(**t, scheme=HierarchyScheme.HM2, stride=4)) == []


def test_scheme_mismatch(scene):
    with pytest.raises(ContractError):
        decode_people(perfect_maps(scene, "hm1"), scheme="hm2")


def test_bad_shapes(scene):
    maps = perfect_maps(scene, "hm2")
    with pytest.raises(ContractError):
        decode_people(maps.with_tensors(face_kp_offsets=np.zeros((128, 128, 10), np.float32)))
    with pytest.raises(ContractError):
        decode_people(maps.with_tensors(person_center_heatmap=maps.person_center_heatmap * 2))


def test_deterministic(scene):
    maps = perfect_maps(scene, "hm1")
    a, b = decode_people(maps), decode_people(maps)
    for p, q in zip(a, b):
        assert p.score == q.score and np.array_equal(p.keypoints, q.keypoints)
        assert np.array_equal(p.sources, q.sources)


def test_max_people(scene):
    assert len(decode_people(perfect_maps(scene, "hm2"), max_people=2)) == 2


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.95), st.floats(0.05, 0.95))
def test_lower_threshold_never_drops_people(seed, t1, t2):
    lo, hi = min(t1, t2), max(t1, t2)
    scene = generate_scene(SceneSpec(seed=seed, n_persons=3))
    maps = perfect_maps(scene, "hm2")
    rng = np.random.default_rng(seed)
    hm = (maps.person_center_heatmap * rng.uniform(0.0, 1.0, maps.person_center_heatmap.shape)).astype(np.float32)
    maps = maps.with_tensors(person_center_heatmap=hm)
    strict = {p.box.center for p in decode_people(maps, center_threshold=hi)}
    loose = {p.box.center for p in decode_people(maps, center_threshold=lo)}
    assert strict <= loose
