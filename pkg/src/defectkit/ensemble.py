"""Multi-model ensembling: pooling, fused evaluation, per-class-best member selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, ROUND_HALF_UP, Decimal
from typing import Hashable, Iterable, Mapping, Optional, Sequence

from .errors import InvalidDetection, MissingReport, MixedThresholds, UnknownImage, UnknownModel, ZeroBaseline
from .evaluation import DEFAULT_IOU_THRESHOLD, EvalReport, GroundTruth, evaluate
from .fusion import NMS, WBF, Detection, FusionParams, combine

DEFAULT_MARGIN = 0.005
BASELINE_ONLY = math.inf

AUTO, TEST, VALIDATION = "auto", "test", "validation"
SPLITS = (AUTO, TEST, VALIDATION)


@dataclass(frozen=True)
class ModelRun:
    model_id: str
    predictions: Mapping[Hashable, Sequence[Detection]] = field(default_factory=dict)
    validation_report: Optional[EvalReport] = None
    test_report: Optional[EvalReport] = None

    def __post_init__(self):
        for image_id, dets in self.predictions.items():
            for d in dets:
                if d.model_id != self.model_id:
                    raise InvalidDetection(
                        f"detection in image {image_id!r} tagged {d.model_id!r}, expected {self.model_id!r}"
                    )

    def report(self, split: str = AUTO) -> EvalReport:
        if split == TEST or (split == AUTO and self.test_report is not None):
            rep = self.test_report
        else:
            rep = self.validation_report
        if rep is None:
            raise MissingReport(f"model {self.model_id!r} has no {split} report")
        return rep


@dataclass(frozen=True)
class EnsembleSpec:
    member_ids: tuple[str, ...]
    fusion: FusionParams

    def __post_init__(self):
        members = tuple(self.member_ids)
        object.__setattr__(self, "member_ids", members)
        if not members:
            raise ValueError("an ensemble needs at least one member")
        if len(set(members)) != len(members):
            raise ValueError(f"duplicate ensemble members {members}")
        if self.fusion.model_count != len(members):
            raise ValueError(
                f"fusion model_count {self.fusion.model_count} != number of members {len(members)}"
            )

    @classmethod
    def of(cls, member_ids: Iterable[str], method: str = NMS, **fusion_kw) -> "EnsembleSpec":
        members = tuple(member_ids)
        return cls(members, FusionParams(method=method, model_count=len(members), **fusion_kw))


@dataclass(frozen=True)
class SelectionPolicy:
    baseline_id: str = "default"
    margin: float = DEFAULT_MARGIN

    def __post_init__(self):
        if not self.margin >= 0.0:
            raise ValueError(f"margin must be non-negative, got {self.margin}")


def _index(runs) -> dict[str, ModelRun]:
    if isinstance(runs, Mapping):
        return dict(runs)
    out = {}
    for r in runs:
        if r.model_id in out:
            raise ValueError(f"duplicate model run {r.model_id!r}")
        out[r.model_id] = r
    return out


def pool_predictions(runs: Sequence[ModelRun], image_id: Hashable) -> list[Detection]:
    """Concatenate every run's final detections for one image."""
    pooled: list[Detection] = []
    for run in runs:
        if image_id not in run.predictions:
            raise UnknownImage(f"model {run.model_id!r} has no predictions indexed for image {image_id!r}")
        pooled.extend(run.predictions[image_id])
    return pooled


def fuse_ensemble(
    spec: EnsembleSpec,
    runs,
    image_ids: Iterable[Hashable],
) -> dict[Hashable, list[Detection]]:
    """Pool and combine member predictions image by image."""
    index = _index(runs)
    missing = [m for m in spec.member_ids if m not in index]
    if missing:
        raise UnknownModel(f"ensemble members without runs: {missing}")
    members = [index[m] for m in spec.member_ids]
    return {im: combine(pool_predictions(members, im), spec.fusion) for im in image_ids}


def evaluate_ensemble(
    spec: EnsembleSpec,
    runs,
    gts: Mapping[Hashable, Sequence[GroundTruth]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    class_ids: Optional[Iterable[int]] = None,
    interpolation: str = "all",
) -> EvalReport:
    fused = fuse_ensemble(spec, runs, sorted(gts, key=str))
    return evaluate(fused, gts, iou_threshold, class_ids, interpolation)


def select_per_class_best(
    runs,
    policy: SelectionPolicy = SelectionPolicy(),
    split: str = AUTO,
    method: str = WBF,
    **fusion_kw,
) -> EnsembleSpec:
    """Pick ensemble members that win some class by more than ``policy.margin``.

    For each class the run with the highest AP wins; ties go to the baseline,
    then to the lexicographically smallest model id. A winner other than the
    baseline joins only if it beats the baseline's AP on that class by more
    than the margin. The baseline is always the first member; the rest
    follow in the order of the first class they won.
    """
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    index = _index(runs)
    base_id = policy.baseline_id
    if base_id not in index:
        raise MissingReport(f"baseline {base_id!r} is not among the runs")
    reports = {mid: run.report(split) for mid, run in index.items()}
    base = reports[base_id]

    order = [base_id] + sorted(m for m in reports if m != base_id)
    members = [base_id]
    for class_id in base.class_ids:
        base_ap = base.ap(class_id)
        if base_ap is None:
            continue
        winner, win_ap = base_id, base_ap
        for mid in order[1:]:
            try:
                ap = reports[mid].ap(class_id)
            except KeyError:
                raise MissingReport(f"model {mid!r} has no AP for class {class_id}") from None
            if ap is not None and ap > win_ap:
                winner, win_ap = mid, ap
        if winner != base_id and win_ap - base_ap > policy.margin and winner not in members:
            members.append(winner)
    return EnsembleSpec.of(members, method=method, **fusion_kw)


def percent_change(candidate: float, baseline: float) -> float:
    if baseline == 0:
        raise ZeroBaseline("relative improvement over a zero baseline is undefined")
    return 100.0 * (candidate - baseline) / baseline


def round_percent(value: float, ndigits: int = 0) -> Decimal:
    """Round a percentage half-up for display (2 decimals, or whole percent)."""
    q = Decimal(1).scaleb(-ndigits)
    return Decimal(repr(value)).quantize(q, rounding=ROUND_HALF_UP)


def _rendered(x: float, ndigits: Optional[int]) -> float:
    if ndigits is None:
        return x
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_EVEN))


@dataclass(frozen=True)
class Improvement:
    map_percent: float
    per_class: Mapping[int, Optional[float]]

    @property
    def rounded(self) -> Decimal:
        return round_percent(self.map_percent, 0)

    @property
    def two_decimals(self) -> Decimal:
        return round_percent(self.map_percent, 2)


def relative_improvement(
    candidate: EvalReport,
    baseline: EvalReport,
    ndigits: Optional[int] = None,
) -> Improvement:
    """Percent change of mAP (and each class AP) of ``candidate`` over ``baseline``.

    With ``ndigits`` the values are first rounded as they would be printed in
    a report, which is how table-level comparisons are usually quoted.
    Per-class entries are ``None`` where the baseline AP is zero or missing.
    """
    if candidate.iou_threshold != baseline.iou_threshold:
        raise MixedThresholds(
            f"reports use different IoU thresholds ({candidate.iou_threshold} vs {baseline.iou_threshold})"
        )
    if set(candidate.class_ids) != set(baseline.class_ids):
        raise ValueError("reports cover different class sets")
    overall = percent_change(_rendered(candidate.map, ndigits), _rendered(baseline.map, ndigits))
    per_class: dict[int, Optional[float]] = {}
    for k in baseline.class_ids:
        b, c = baseline.ap(k), candidate.ap(k)
        if b is None or c is None or _rendered(b, ndigits) == 0:
            per_class[k] = None
        else:
            per_class[k] = percent_change(_rendered(c, ndigits), _rendered(b, ndigits))
    return Improvement(overall, per_class)
