import numpy as np
import pytest

from conftest import det_row, make_det, random_rows, to_dets
from oracles import iou_np, nms_bruteforce, wbf_reference

from defectkit.errors import InvalidDetection, UnknownModel
from defectkit.fusion import NMS, WBF, Detection, FusionParams, combine, nms, wbf
from defectkit.geometry import AbsBox, iou


# -- NMS ---------------------------------------------------------------------


def test_nms_suppresses_overlap():
    a = make_det(0, 0, 10, 10, 0.9)
    b = make_det(1, 1, 11, 11, 0.8)
    assert iou_np((0, 0, 10, 10), (1, 1, 11, 11)) == pytest.approx(0.680672268907563, abs=1e-12)
    assert nms([b, a], 0.5) == [a]


def test_nms_single_detection():
    a = make_det(0, 0, 10, 10, 0.3)
    assert nms([a], 0.45) == [a]


def test_nms_is_class_wise():
    a = make_det(0, 0, 10, 10, 0.9, k=0)
    b = make_det(1, 1, 11, 11, 0.8, k=1)
    assert nms([a, b], 0.5) == [a, b]


def test_nms_threshold_is_strict():
    # IoU exactly 0.5 survives a 0.5 threshold
    a = make_det(0, 0, 10, 10, 0.9)
    b = make_det(0, 0, 10, 5, 0.8)
    assert iou(a.box, b.box) == 0.5
    assert len(nms([a, b], 0.5)) == 2


def test_nms_tie_break_prefers_smaller_x1_then_model():
    a = make_det(0, 0, 10, 10, 0.5, model="m2")
    b = make_det(0.5, 0, 10.5, 10, 0.5, model="m1")
    assert nms([b, a], 0.3) == [a]
    c = make_det(0, 0, 10, 10, 0.5, model="m1")
    assert nms([a, c], 0.3) == [c]


def test_nms_rejects_non_detections():
    with pytest.raises(InvalidDetection):
        nms([(0, 0, 1, 1)], 0.5)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(box=AbsBox(0, 0, 0, 5), class_id=0, confidence=0.5),
        dict(box=AbsBox(0, 0, 5, 5), class_id=0, confidence=1.5),
        dict(box=AbsBox(0, 0, 5, 5), class_id=-1, confidence=0.5),
        dict(box=AbsBox(0, 0, 5, 5), class_id=0, confidence=float("nan")),
    ],
)
def test_detection_invariants(kwargs):
    with pytest.raises(InvalidDetection):
        Detection(**kwargs)


def test_nms_matches_bruteforce_random(rng):
    for _ in range(300):
        rows = random_rows(rng, int(rng.integers(0, 51)), models=("a", "b"))
        thr = float(rng.uniform(0.1, 0.9))
        got = [det_row(d) for d in nms(to_dets(rows), thr)]
        assert got == nms_bruteforce(rows, thr)


def test_nms_idempotent_and_permutation_invariant(rng):
    for _ in range(200):
        rows = random_rows(rng, int(rng.integers(1, 40)))
        dets = to_dets(rows)
        once = nms(dets, 0.45)
        assert nms(once, 0.45) == once
        perm = [dets[i] for i in rng.permutation(len(dets))]
        assert nms(perm, 0.45) == once


def test_nms_output_properties(rng):
    for _ in range(100):
        dets = to_dets(random_rows(rng, 30))
        out = nms(dets, 0.4)
        confs = [d.confidence for d in out]
        assert confs == sorted(confs, reverse=True)
        assert set(out) <= set(dets)
        for k in {d.class_id for d in dets}:
            best = max(d.confidence for d in dets if d.class_id == k)
            kept = [d for d in out if d.class_id == k]
            assert kept[0].confidence == best
            for i, a in enumerate(kept):
                for b in kept[i + 1:]:
                    assert iou(a.box, b.box) <= 0.4


# -- WBF ---------------------------------------------------------------------


def test_wbf_two_box_cluster():
    a = make_det(0, 0, 10, 10, 0.6, model="A")
    b = make_det(2, 2, 12, 12, 0.2, model="B")
    # IoU 64/136 ~ 0.47: separate at 0.55, merged at 0.4
    assert len(wbf([a, b], FusionParams(WBF, 0.55, model_count=2))) == 2
    (f,) = wbf([a, b], FusionParams(WBF, 0.4, model_count=2))
    assert f.box.as_tuple() == pytest.approx((0.5, 0.5, 10.5, 10.5), abs=1e-9)
    assert f.confidence == pytest.approx(0.4, abs=1e-9)
    assert f.model_id == "A+B"


def test_wbf_single_model_is_identity(rng):
    dets = [
        make_det(0, 0, 10, 10, 0.37, k=0),
        make_det(50, 50, 61, 73, 0.91, k=0),
        make_det(0, 0, 10, 10, 0.13, k=2),
        make_det(20.123456789, 30.3, 25.7, 39.99, 0.3333333, k=1),
    ]
    out = wbf(dets, FusionParams(WBF, model_count=1))
    assert sorted(out, key=lambda d: d.confidence) == sorted(dets, key=lambda d: d.confidence)


def test_wbf_rescales_lonely_box():
    d = make_det(0, 0, 10, 10, 0.9, model="a")
    (f,) = wbf([d], FusionParams(WBF, model_count=3))
    assert f.confidence == pytest.approx(0.3, abs=1e-12)
    assert f.box == d.box
    assert wbf_reference([det_row(d)], 0.55, 3)[0][4] == pytest.approx(0.3, abs=1e-12)


def test_wbf_skip_confidence():
    a = make_det(0, 0, 10, 10, 0.05)
    b = make_det(50, 50, 60, 60, 0.5)
    out = wbf([a, b], FusionParams(WBF, skip_confidence=0.1))
    assert out == [b]


def test_wbf_unknown_model():
    d = make_det(0, 0, 10, 10, 0.9, model="x")
    with pytest.raises(UnknownModel):
        wbf([d], FusionParams(WBF, model_weights={"a": 1.0}))


def test_wbf_weights_normalized_to_mean_one():
    a = make_det(0, 0, 10, 10, 0.4, model="a")
    b = make_det(0, 0, 10, 10, 0.4, model="b")
    params = FusionParams(WBF, model_weights={"a": 3.0, "b": 1.0}, model_count=2)
    (f,) = wbf([a, b], params)
    # weights become 1.5 and 0.5: weighted confidences 0.6 and 0.2
    assert f.confidence == pytest.approx(0.4)
    rows = [det_row(a), det_row(b)]
    assert wbf_reference(rows, 0.55, 2, weights={"a": 3.0, "b": 1.0})[0][4] == pytest.approx(0.4)


def _compare_wbf(rows, thr, T, skip=0.0, weights=None):
    params = FusionParams(WBF, thr, skip, weights, T)
    got = wbf(to_dets(rows), params)
    ref = wbf_reference(rows, thr, T, skip, weights)
    assert len(got) == len(ref)
    got_sorted = sorted(((*d.box.as_tuple(), d.confidence, d.class_id) for d in got))
    ref_sorted = sorted(tuple(float(v) for v in r) for r in ref)
    for g, r in zip(got_sorted, ref_sorted):
        assert g[5] == r[5]
        assert g[:5] == pytest.approx(r[:5], abs=1e-9)


def test_wbf_matches_reference_random(rng):
    models = ("m0", "m1", "m2")
    for _ in range(200):
        rows = random_rows(rng, int(rng.integers(0, 40)), n_classes=3, models=models, extent=60, coarse_conf=False)
        thr = float(rng.uniform(0.2, 0.8))
        weights = {m: float(rng.uniform(0.5, 2.0)) for m in models} if rng.random() < 0.5 else None
        _compare_wbf(rows, thr, 3, float(rng.uniform(0, 0.3)), weights)


def test_wbf_envelope_and_confidence_bounds(rng):
    for _ in range(100):
        dets = to_dets(random_rows(rng, 30, n_classes=2, models=("a", "b"), extent=40, coarse_conf=False))
        out = wbf(dets, FusionParams(WBF, 0.5, model_count=2))
        for f in out:
            assert f.class_id in {d.class_id for d in dets}
            same = [d for d in dets if d.class_id == f.class_id]
            assert min(d.box.x1 for d in same) - 1e-9 <= f.box.x1 <= max(d.box.x1 for d in same) + 1e-9
            assert f.confidence <= max(d.confidence for d in same) + 1e-12


# -- combine -----------------------------------------------------------------


def test_combine_dispatch(rng):
    dets = to_dets(random_rows(rng, 25, models=("a", "b")))
    p_nms = FusionParams(NMS, 0.5)
    p_wbf = FusionParams(WBF, 0.5, model_count=2)
    assert combine(dets, p_nms) == nms(dets, 0.5)
    assert combine(dets, p_wbf) == wbf(dets, p_wbf)
    assert combine([], p_nms) == []
    assert combine([], p_wbf) == []


def test_fusion_params_defaults_and_validation():
    assert FusionParams(NMS).iou_threshold == 0.45
    assert FusionParams(WBF).iou_threshold == 0.55
    for bad in (dict(method="soft"), dict(iou_threshold=1.0), dict(iou_threshold=0.0),
                dict(model_weights={"a": 0.0}), dict(model_count=0), dict(skip_confidence=2.0)):
        with pytest.raises(ValueError):
            FusionParams(**bad)
