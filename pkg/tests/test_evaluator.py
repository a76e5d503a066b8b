import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import make_person
from hierpose.decoder import DecodedPerson, decode_people
from hierpose.errors import ContractError
from hierpose.evaluator import (
    EvalReport,
    PartScore,
    RECALL_THRESHOLDS,
    ScoredBox,
    box_iou,
    evaluate_box_ap,
    evaluate_keypoint_ap,
    evaluate_wholebody,
    face_boxes_from_keypoints,
    gt_face_boxes,
    load_sigmas,
    match_image,
    oks,
    results_from_json,
    results_to_json,
)
from hierpose.layout import FACE, NUM_KEYPOINTS, PersonBox
from hierpose.synth import SceneSpec, generate_scene, perfect_maps

SIGMAS = load_sigmas()


def det(kps_xy, score=1.0, box=((256.0, 256.0), 200.0, 300.0), kp_score=1.0):
    k = np.zeros((NUM_KEYPOINTS, 3))
    k[:, :2] = kps_xy
    k[:, 2] = kp_score
    return DecodedPerson(score, PersonBox(*box), k, np.full(NUM_KEYPOINTS, "detected"))


def copy_of(ann, score=1.0, shift=0.0):
    return det(ann.keypoints[:, :2] + shift, score, (ann.person_box.center, ann.person_box.width, ann.person_box.height))


def test_sigmas_are_doubled_published_values():
    assert SIGMAS.shape == (NUM_KEYPOINTS,)
    assert SIGMAS[0] == pytest.approx(2 * 0.026)  # nose
    assert SIGMAS[23] == pytest.approx(2 * 0.042)  # first face landmark


def test_oks_closed_form():
    gt = make_person({0: (100.0, 100.0)})
    d = math.sqrt(2 * gt.person_box.area) * SIGMAS[0]
    xy = np.zeros((NUM_KEYPOINTS, 2))
    xy[0] = (100.0 + d, 100.0)
    assert oks(xy, gt, "body", SIGMAS) == pytest.approx(math.exp(-1), abs=1e-12)
    xy[0] = (100.0, 100.0)
    assert oks(xy, gt, "body", SIGMAS) == pytest.approx(1.0)


def test_oks_unlabeled_part_is_none():
    gt = make_person({0: (100.0, 100.0)})
    assert oks(np.zeros((NUM_KEYPOINTS, 2)), gt, "face", SIGMAS) is None


def test_oks_unknown_part():
    with pytest.raises(ContractError):
        oks(np.zeros((NUM_KEYPOINTS, 2)), make_person({0: (1, 1)}), "tail", SIGMAS)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 10.0))
def test_oks_scale_invariant(seed, k):
    rng = np.random.default_rng(seed)
    pts = {i: tuple(rng.uniform(50, 450, 2)) for i in range(0, 133, 3)}
    gt = make_person(pts)
    xy = gt.keypoints[:, :2] + rng.normal(0, 5, (NUM_KEYPOINTS, 2))
    scaled = make_person({i: (x * k, y * k) for i, (x, y) in pts.items()}, box=((256 * k, 256 * k), 200 * k, 300 * k))
    for part in ("body", "foot", "face", "hand"):
        assert oks(xy * k, scaled, part, SIGMAS) == pytest.approx(oks(xy, gt, part, SIGMAS), abs=1e-9)


def lexicographic_oracle(sim, t):
    """Best injective assignment, judged detection by detection in score order."""
    n_dt, n_gt = sim.shape
    best_key, best = None, None
    options = [[-1] + [g for g in range(n_gt) if sim[d, g] >= t] for d in range(n_dt)]
    for combo in itertools.product(*options):
        used = [g for g in combo if g >= 0]
        if len(used) != len(set(used)):
            continue
        key = tuple((g >= 0, sim[d, g] if g >= 0 else 0.0) for d, g in enumerate(combo))
        if best_key is None or key > best_key:
            best_key, best = key, combo
    return list(best)


def test_greedy_counterexample_is_not_max_cardinality():
    sim = np.array([[0.9, 0.8], [0.85, 0.1]])
    match, _ = match_image(sim, [0.5])
    assert match[0].tolist() == [0, -1]
    assert lexicographic_oracle(sim, 0.5) == [0, -1]
    # Assigning dt0 -> g1 and dt1 -> g0 would match both; COCO does not.


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(0, 4), st.integers(0, 4))
def test_greedy_equals_exhaustive(seed, n_dt, n_gt):
    rng = np.random.default_rng(seed)
    sim = rng.uniform(0, 1, (n_dt, n_gt))
    thresholds = [0.3, 0.5, 0.75]
    match, ignore = match_image(sim, thresholds)
    assert not ignore.any()
    for ti, t in enumerate(thresholds):
        assert match[ti].tolist() == lexicographic_oracle(sim, t)


def test_match_prefers_non_ignored_gt():
    sim = np.array([[0.9, 0.7]])
    match, ignore = match_image(sim, [0.5], gt_ignore=np.array([True, False]))
    assert match[0, 0] == 1 and not ignore[0, 0]


def test_three_gts_two_perfect_dets():
    anns = generate_scene(SceneSpec(seed=3, n_persons=3))
    results = {3: [copy_of(anns[0], 0.9), copy_of(anns[1], 0.8)]}
    s = evaluate_keypoint_ap(results, {3: anns}, "body", SIGMAS)
    assert s.ap == pytest.approx(67 / 101)
    assert s.ar == pytest.approx(2 / 3)


def test_perfect_decode_scores_one(scene):
    people = decode_people(perfect_maps(scene, "hm2"))
    report = evaluate_wholebody({11: people}, {11: scene})
    for name, s in report.parts.items():
        assert s.ap == pytest.approx(1.0) and s.ar == pytest.approx(1.0), name
    assert report.mean.ap == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_ap_invariant_to_monotone_score_transform(seed):
    rng = np.random.default_rng(seed)
    anns = generate_scene(SceneSpec(seed=seed % 1000, n_persons=3))
    dets = [copy_of(a, float(rng.uniform(0.05, 1)), rng.normal(0, 8, (NUM_KEYPOINTS, 2))) for a in anns]
    dets.append(det(rng.uniform(0, 512, (NUM_KEYPOINTS, 2)), float(rng.uniform(0.05, 1))))
    moved = [DecodedPerson(d.score ** 3 * 0.5, d.box, d.keypoints, d.sources) for d in dets]
    for part in ("body", "face"):
        a = evaluate_keypoint_ap({0: dets}, {0: anns}, part, SIGMAS)
        b = evaluate_keypoint_ap({0: moved}, {0: anns}, part, SIGMAS)
        assert a.ap == pytest.approx(b.ap, abs=1e-12) and a.ar == pytest.approx(b.ar, abs=1e-12)


def test_no_detections_scores_zero(scene):
    s = evaluate_keypoint_ap({}, {0: scene}, "body", SIGMAS)
    assert s.ap == 0.0 and s.ar == 0.0


def test_empty_ground_truth_is_undefined():
    gt = make_person({0: (100.0, 100.0)})
    s = evaluate_keypoint_ap({0: [det(np.zeros((NUM_KEYPOINTS, 2)))]}, {0: [gt]}, "foot", SIGMAS)
    assert math.isnan(s.ap) and not s.defined
    report = evaluate_wholebody({}, {0: [gt]})
    assert report.to_dict()["foot"] == {"ap": None, "ar": None}
    assert "n/a" in report.to_table()


def test_max_dets_truncates(scene):
    gt = scene[:1]
    junk = [det(np.full((NUM_KEYPOINTS, 2), -1000.0), 0.9) for _ in range(20)]
    good = copy_of(gt[0], 0.5)
    full = evaluate_keypoint_ap({0: junk + [good]}, {0: gt}, "body", SIGMAS, max_dets=21)
    cut = evaluate_keypoint_ap({0: junk + [good]}, {0: gt}, "body", SIGMAS)
    assert full.ar == pytest.approx(1.0) and cut.ar == 0.0


def test_wholebody_mean_is_plain_average():
    values = [0.552, 0.491, 0.746, 0.470, 0.315]
    parts = {n: PartScore(v, v) for n, v in zip(("body", "foot", "face", "hand", "wholebody"), values)}
    report = EvalReport(parts)
    assert report.mean.ap == pytest.approx(0.5148)
    assert round(100 * report.mean.ap, 1) == 51.5


def test_face_box_hull_and_score():
    xy = np.zeros((NUM_KEYPOINTS, 2))
    rng = np.random.default_rng(0)
    xy[FACE.start:FACE.stop] = rng.uniform((100, 60), (140, 110), (len(FACE), 2))
    xy[FACE.start] = (100, 60)
    xy[FACE.start + 1] = (140, 110)
    p = det(xy)
    p.keypoints[FACE.start:FACE.stop, 2] = np.tile([0.6, 0.8], len(FACE) // 2)
    box = face_boxes_from_keypoints(p)
    assert box.xywh == pytest.approx((100, 60, 40, 50))
    assert box.score == pytest.approx(0.7)


def test_face_box_degenerate():
    p = det(np.full((NUM_KEYPOINTS, 2), 50.0))
    box = face_boxes_from_keypoints(p)
    assert box.area == 0.0
    assert box_iou(box.xywh, (0, 0, 100, 100)) == 0.0
    assert box_iou((5, 5, 0, 0), (5, 5, 0, 0)) == 0.0
    p.keypoints[:, 2] = 0.0
    assert face_boxes_from_keypoints(p) is None


def test_box_ap_single_partial_overlap():
    r = evaluate_box_ap({0: [ScoredBox(0, 0, 100, 62, 0.9)]}, {0: [(0, 0, 100, 100)]})
    assert r.ap == pytest.approx(0.3)
    assert (r.ap50, r.ap75) == (pytest.approx(1.0), 0.0)
    assert r.ap_l == pytest.approx(0.3)
    assert math.isnan(r.ap_m) and r.to_dict()["ap_m"] is None


def test_box_ap_hand_computed_pr_curve():
    gts = {0: [(0, 0, 100, 100)], 1: [(200, 200, 100, 100)]}
    preds = {
        0: [ScoredBox(0, 0, 100, 100, 0.9), ScoredBox(400, 400, 100, 100, 0.8)],
        1: [ScoredBox(200, 200, 100, 100, 0.7)],
    }
    # tp/fp in score order: T F T; interpolated precision is 1 up to recall
    # 0.5 and 2/3 above it.
    n_low = int((RECALL_THRESHOLDS <= 0.5).sum())
    expected = (n_low + (101 - n_low) * 2 / 3) / 101
    assert evaluate_box_ap(preds, gts).ap == pytest.approx(expected)


def raster_iou(a, b, res=0.25):
    xs = np.arange(0, 64, res) + res / 2
    gx, gy = np.meshgrid(xs, xs)

    def mask(box):
        x, y, w, h = box
        return (gx >= x) & (gx < x + w) & (gy >= y) & (gy < y + h)

    ma, mb = mask(a), mask(b)
    union = (ma | mb).sum()
    return (ma & mb).sum() / union if union else 0.0


quarter = st.integers(0, 160).map(lambda v: v / 4)


@settings(max_examples=150, deadline=None)
@given(st.tuples(quarter, quarter, quarter, quarter), st.tuples(quarter, quarter, quarter, quarter))
def test_iou_matches_raster(a, b):
    a = (a[0] / 2, a[1] / 2, a[2] / 2 + 0.5, a[3] / 2 + 0.5)
    b = (b[0] / 2, b[1] / 2, b[2] / 2 + 0.5, b[3] / 2 + 0.5)
    a = tuple(round(v * 4) / 4 for v in a)
    b = tuple(round(v * 4) / 4 for v in b)
    assert box_iou(a, b) == pytest.approx(raster_iou(a, b), abs=1e-3)
    assert box_iou(a, b) == pytest.approx(box_iou(b, a))


def test_gt_face_boxes(scene):
    boxes = gt_face_boxes({0: scene})[0]
    assert len(boxes) == len(scene)
    assert all(w > 0 and h > 0 for _, _, w, h in boxes)


def test_results_json_round_trip(scene):
    people = decode_people(perfect_maps(scene, "hm2"))
    back = results_from_json(results_to_json({5: people}))[5]
    for p, q in zip(people, back):
        assert p.score == q.score
        assert np.allclose(p.keypoints, q.keypoints)
        assert np.allclose(p.box.xywh, q.box.xywh)
