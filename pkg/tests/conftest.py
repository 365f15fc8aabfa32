import numpy as np
import pytest

from defectkit.evaluation import GroundTruth
from defectkit.fusion import Detection
from defectkit.geometry import AbsBox


def random_rows(rng, n, n_classes=5, models=("",), extent=100.0, coarse_conf=True):
    """Random (x1, y1, x2, y2, conf, cls, model) rows with positive-area boxes."""
    rows = []
    for _ in range(n):
        x1, y1 = rng.uniform(0, extent, 2)
        w, h = rng.uniform(2, 40, 2)
        conf = float(np.round(rng.uniform(0.01, 1.0), 2)) if coarse_conf else float(rng.uniform(0.01, 1.0))
        rows.append((float(x1), float(y1), float(x1 + w), float(y1 + h), conf,
                     int(rng.integers(0, n_classes)), str(models[int(rng.integers(0, len(models)))])))
    return rows


def to_dets(rows):
    return [Detection(AbsBox(*r[:4]), r[5], r[4], r[6]) for r in rows]


def det_row(d):
    b = d.box
    return (b.x1, b.y1, b.x2, b.y2, d.confidence, d.class_id, d.model_id)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_gt(x1, y1, x2, y2, k=0, image_id="img"):
    return GroundTruth(AbsBox(x1, y1, x2, y2), k, image_id)


def make_det(x1, y1, x2, y2, conf, k=0, model=""):
    return Detection(AbsBox(x1, y1, x2, y2), k, conf, model)


# -- acceptance criteria bookkeeping -----------------------------------------

_CRITERIA: dict[int, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion covered by the test")


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    number, text = mark.args
    entry = _CRITERIA.setdefault(number, [text, True])
    entry[1] = entry[1] and call.excinfo is None


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        text, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {text}")
