import numpy as np
import pytest

from hierpose.layout import NUM_KEYPOINTS, PersonBox, WholeBodyAnnotation, derive_part_boxes
from hierpose.synth import SceneSpec, generate_scene

_ACCEPTANCE: list[str] = []


def make_person(points=None, box=((256.0, 256.0), 200.0, 300.0), image_id=0, default_v=0):
    """Annotation with the given ``{index: (x, y[, v])}`` keypoints labeled."""
    kps = np.zeros((NUM_KEYPOINTS, 3))
    kps[:, 2] = default_v
    for k, p in (points or {}).items():
        kps[k, 0], kps[k, 1] = p[0], p[1]
        kps[k, 2] = p[2] if len(p) > 2 else 2
    center, w, h = box
    return derive_part_boxes(WholeBodyAnnotation(kps, PersonBox(center, w, h), image_id=image_id))


@pytest.fixture
def scene():
    return generate_scene(SceneSpec(seed=11, n_persons=4))


@pytest.fixture(scope="session")
def acceptance_log():
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
