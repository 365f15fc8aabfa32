import random
from decimal import Decimal

import pytest

from conftest import make_gt, random_rows, to_dets

from defectkit.ensemble import (
    BASELINE_ONLY,
    EnsembleSpec,
    ModelRun,
    SelectionPolicy,
    evaluate_ensemble,
    percent_change,
    pool_predictions,
    relative_improvement,
    round_percent,
    select_per_class_best,
)
from defectkit.errors import InvalidDetection, MissingReport, MixedThresholds, UnknownImage, ZeroBaseline
from defectkit.evaluation import EvalReport, GroundTruth, evaluate
from defectkit.fusion import NMS, WBF, Detection, nms
from defectkit.geometry import AbsBox
from defectkit.fixtures import reference_runs, row_report


def _tagged(dets, model_id):
    return [Detection(d.box, d.class_id, d.confidence, model_id) for d in dets]


def _run(rng, model_id, images, n=6):
    return ModelRun(model_id, {im: nms(to_dets(random_rows(rng, n, 3, (model_id,), 50)), 0.45) for im in images})


def _gts(rng, images):
    return {im: [GroundTruth(AbsBox(*r[:4]), r[5], im) for r in random_rows(rng, 4, 3, extent=50)] for im in images}


def test_pool_concatenates():
    a = ModelRun("a", {"x": [Detection(AbsBox(0, 0, 1, 1), 0, 0.5, "a")] * 2})
    b = ModelRun("b", {"x": [Detection(AbsBox(0, 0, 2, 2), 1, 0.4, "b")] * 3})
    pooled = pool_predictions([a, b], "x")
    assert len(pooled) == 5
    assert [d.model_id for d in pooled] == ["a", "a", "b", "b", "b"]
    assert pool_predictions([a], "x") == list(a.predictions["x"])


def test_pool_unknown_image():
    with pytest.raises(UnknownImage):
        pool_predictions([ModelRun("a", {})], "x")


def test_run_rejects_foreign_detections():
    with pytest.raises(InvalidDetection):
        ModelRun("a", {"x": [Detection(AbsBox(0, 0, 1, 1), 0, 0.5, "b")]})


def test_identical_copies_collapse_under_nms(rng):
    images = ["i0", "i1", "i2"]
    base = _run(rng, "m", images)
    copies = [ModelRun(f"m{j}", {im: _tagged(ds, f"m{j}") for im, ds in base.predictions.items()}) for j in range(4)]
    for im in images:
        fused = nms(pool_predictions(copies, im), 0.45)
        strip = lambda ds: [(d.box, d.class_id, d.confidence) for d in ds]
        assert strip(fused) == strip(nms(base.predictions[im], 0.45))


def test_single_member_nms_equals_standalone(rng):
    images = [f"i{k}" for k in range(5)]
    run = _run(rng, "solo", images)
    gts = _gts(rng, images)
    spec = EnsembleSpec.of(["solo"], NMS)
    assert evaluate_ensemble(spec, [run], gts) == evaluate(run.predictions, gts)


def test_duplicate_members_nms_equals_single(rng):
    images = [f"i{k}" for k in range(5)]
    run = _run(rng, "a", images)
    dup = ModelRun("b", {im: _tagged(ds, "b") for im, ds in run.predictions.items()})
    gts = _gts(rng, images)
    spec = EnsembleSpec.of(["a", "b"], NMS)
    assert evaluate_ensemble(spec, [run, dup], gts) == evaluate(run.predictions, gts)


def test_empty_member_does_not_change_nms(rng):
    images = [f"i{k}" for k in range(5)]
    a, b = _run(rng, "a", images), _run(rng, "b", images)
    empty = ModelRun("z", {im: [] for im in images})
    gts = _gts(rng, images)
    r2 = evaluate_ensemble(EnsembleSpec.of(["a", "b"], NMS), [a, b, empty], gts)
    r3 = evaluate_ensemble(EnsembleSpec.of(["a", "b", "z"], NMS), [a, b, empty], gts)
    assert r2 == r3


def complementary_fixture():
    """Model A finds only class 1 defects, model B only class 2, both exactly."""
    gts, a, b = {}, {}, {}
    for i in range(4):
        im = f"im{i}"
        g1 = make_gt(10 * i, 0, 10 * i + 8, 8, 1, im)
        g2 = make_gt(0, 50 + 5 * i, 8, 58 + 5 * i, 2, im)
        gts[im] = [g1, g2]
        a[im] = [Detection(g1.box, 1, 0.9, "A"), Detection(AbsBox(70, 70, 80, 80), 2, 0.3, "A")]
        b[im] = [Detection(g2.box, 2, 0.8, "B")]
    return gts, ModelRun("A", a), ModelRun("B", b)


@pytest.mark.parametrize("method", [NMS, WBF])
def test_complementary_models_improve(method):
    gts, a, b = complementary_fixture()
    ra, rb = evaluate(a.predictions, gts), evaluate(b.predictions, gts)
    ens = evaluate_ensemble(EnsembleSpec.of(["A", "B"], method), [a, b], gts)
    assert ens.map >= max(ra.map, rb.map)
    assert ens.map == 1.0
    assert ra.map == pytest.approx(0.5) and rb.map == pytest.approx(0.5)


def test_spec_invariants():
    with pytest.raises(ValueError):
        EnsembleSpec.of([])
    with pytest.raises(ValueError):
        EnsembleSpec.of(["a", "a"])
    from defectkit.fusion import FusionParams

    with pytest.raises(ValueError):
        EnsembleSpec(("a", "b"), FusionParams(NMS, model_count=3))


# -- selection ---------------------------------------------------------------


def test_select_on_reference_matrix():
    spec = select_per_class_best(reference_runs(), SelectionPolicy("default", 0.005))
    assert set(spec.member_ids) == {"default", "vertical-flip", "angle-45"}
    assert spec.member_ids[0] == "default"
    assert spec.fusion.model_count == 3
    assert spec.fusion.method == WBF


def test_select_margin_zero_admits_gap_winner():
    spec = select_per_class_best(reference_runs(), SelectionPolicy("default", 0.0))
    # gap 0.968 ties between shear-30 and translate-0.0; lexicographic id wins
    assert set(spec.member_ids) == {"default", "vertical-flip", "angle-45", "shear-30"}


def test_select_single_and_baseline_only():
    runs = reference_runs()
    base = [r for r in runs if r.model_id == "default"]
    assert select_per_class_best(base, SelectionPolicy("default")).member_ids == ("default",)
    assert select_per_class_best(runs, SelectionPolicy("default", BASELINE_ONLY)).member_ids == ("default",)


def test_select_is_permutation_invariant():
    runs = reference_runs()
    expected = select_per_class_best(runs, SelectionPolicy()).member_ids
    rnd = random.Random(7)
    for _ in range(20):
        shuffled = runs[:]
        rnd.shuffle(shuffled)
        assert select_per_class_best(shuffled, SelectionPolicy()).member_ids == expected


def test_select_missing_report():
    runs = [ModelRun("default", test_report=row_report((0.5,) * 5)), ModelRun("other")]
    with pytest.raises(MissingReport):
        select_per_class_best(runs, SelectionPolicy())
    with pytest.raises(MissingReport):
        select_per_class_best(runs[:1], SelectionPolicy("nope"))


def test_select_uses_requested_split():
    val_best = ModelRun("x", validation_report=row_report((0.9, 0.5, 0.5, 0.5, 0.5)),
                        test_report=row_report((0.1, 0.1, 0.1, 0.1, 0.1)))
    base = ModelRun("default", validation_report=row_report((0.5,) * 5), test_report=row_report((0.5,) * 5))
    assert select_per_class_best([base, val_best], split="validation").member_ids == ("default", "x")
    assert select_per_class_best([base, val_best], split="test").member_ids == ("default",)
    assert select_per_class_best([base, val_best]).member_ids == ("default",)


def test_policy_validation():
    with pytest.raises(ValueError):
        SelectionPolicy(margin=-0.1)


# -- improvement arithmetic --------------------------------------------------


def test_percent_change_values():
    assert round_percent(percent_change(0.868, 0.790), 2) == Decimal("9.87")
    assert round_percent(percent_change(0.868, 0.790)) == 10
    assert round_percent(percent_change(0.812, 0.790), 2) == Decimal("2.78")
    assert round_percent(percent_change(0.812, 0.790)) == 3


def test_relative_improvement_reports():
    base = row_report((0.873, 0.967, 0.602, 1.000, 0.508))
    best = row_report((0.878, 0.969, 0.850, 1.000, 0.642))
    imp = relative_improvement(best, base, ndigits=3)
    assert imp.two_decimals == Decimal("9.87")
    assert imp.rounded == 10
    assert relative_improvement(best, base).rounded == 10
    assert imp.per_class[2] == pytest.approx(100 * (0.850 - 0.602) / 0.602)
    assert relative_improvement(base, base).map_percent == 0.0
    assert all(v == 0.0 for v in relative_improvement(base, base).per_class.values())


def test_relative_improvement_errors():
    r = EvalReport.from_aps({0: 0.0})
    with pytest.raises(ZeroBaseline):
        relative_improvement(EvalReport.from_aps({0: 0.5}), r)
    with pytest.raises(MixedThresholds):
        relative_improvement(EvalReport.from_aps({0: 0.5}, 0.5), EvalReport.from_aps({0: 0.5}, 0.75))
