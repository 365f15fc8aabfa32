"""Matching predictions to ground truth, per-class AP and mAP.

Precision/recall curves are pooled per class over all images before
integration. Classes without ground truth are left out of the mAP.
"""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .errors import EmptySeries, InvalidDetection, InvalidGroundTruth, NoGroundTruth
from .fusion import Detection, rank_key
from .geometry import AbsBox, iou

DEFAULT_IOU_THRESHOLD = 0.5
ALL_POINT = "all"
ELEVEN_POINT = "11point"
INTERPOLATIONS = (ALL_POINT, ELEVEN_POINT)


@dataclass(frozen=True)
class GroundTruth:
    box: AbsBox
    class_id: int
    image_id: Hashable = ""

    def __post_init__(self):
        if not isinstance(self.box, AbsBox):
            raise InvalidGroundTruth(f"box must be an AbsBox, got {type(self.box).__name__}")
        if isinstance(self.class_id, bool) or not isinstance(self.class_id, int) or self.class_id < 0:
            raise InvalidGroundTruth(f"class_id must be a non-negative integer, got {self.class_id!r}")
        if self.box.width <= 0.0 or self.box.height <= 0.0:
            raise InvalidGroundTruth(f"ground-truth box {self.box.as_tuple()} has zero area")


@dataclass(frozen=True)
class PredictionMatch:
    detection: Detection
    is_true_positive: bool
    matched_gt: Optional[tuple] = None  # (image_id, index into that image's ground truth)
    image_id: Hashable = ""


@dataclass(frozen=True)
class MatchSet:
    """Predictions in ranked order with their TP/FP outcome, plus GT counts per class."""

    matches: tuple[PredictionMatch, ...]
    gt_counts: Mapping[int, int]

    def for_class(self, class_id: int) -> "MatchSet":
        return MatchSet(
            tuple(m for m in self.matches if m.detection.class_id == class_id),
            {class_id: self.gt_counts.get(class_id, 0)},
        )

    @property
    def classes(self) -> list[int]:
        seen = set(self.gt_counts) | {m.detection.class_id for m in self.matches}
        return sorted(seen)


@dataclass(frozen=True)
class ClassAp:
    class_id: int
    ap: Optional[float]  # None when the class has no ground truth
    gt_count: int
    prediction_count: int

    def __post_init__(self):
        if self.ap is not None and not 0.0 <= self.ap <= 1.0:
            raise ValueError(f"AP {self.ap} outside [0, 1]")


def mean_ap(per_class: Iterable[ClassAp]) -> float:
    aps = [c.ap for c in per_class if c.gt_count >= 1 and c.ap is not None]
    if not aps:
        raise NoGroundTruth("no class has ground truth; mAP is undefined")
    return math.fsum(aps) / len(aps)


@dataclass(frozen=True)
class EvalReport:
    iou_threshold: float
    per_class: tuple[ClassAp, ...]
    map: float

    def __post_init__(self):
        object.__setattr__(self, "per_class", tuple(sorted(self.per_class, key=lambda c: c.class_id)))
        expected = mean_ap(self.per_class)
        if abs(expected - self.map) > 1e-12:
            raise ValueError(f"map {self.map} is not the mean of per-class APs ({expected})")

    @classmethod
    def from_class_aps(
        cls,
        per_class: Iterable[ClassAp],
        iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    ) -> "EvalReport":
        per_class = tuple(per_class)
        return cls(iou_threshold, per_class, mean_ap(per_class))

    @classmethod
    def from_aps(
        cls,
        aps: Mapping[int, float],
        iou_threshold: float = DEFAULT_IOU_THRESHOLD,
        gt_counts: Optional[Mapping[int, int]] = None,
    ) -> "EvalReport":
        """Build a report from known per-class APs (e.g. transcribed tables)."""
        gt_counts = gt_counts or {}
        per_class = [ClassAp(k, float(v), gt_counts.get(k, 1), 0) for k, v in aps.items()]
        return cls.from_class_aps(per_class, iou_threshold)

    def ap(self, class_id: int) -> Optional[float]:
        for c in self.per_class:
            if c.class_id == class_id:
                return c.ap
        raise KeyError(class_id)

    @property
    def class_ids(self) -> list[int]:
        return [c.class_id for c in self.per_class]

    def to_dict(self) -> dict:
        return {
            "iou_threshold": self.iou_threshold,
            "map": self.map,
            "per_class": [
                {
                    "class_id": c.class_id,
                    "ap": c.ap,
                    "gt_count": c.gt_count,
                    "prediction_count": c.prediction_count,
                }
                for c in self.per_class
            ],
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "EvalReport":
        per_class = tuple(
            ClassAp(int(c["class_id"]), None if c["ap"] is None else float(c["ap"]),
                    int(c.get("gt_count", 1)), int(c.get("prediction_count", 0)))
            for c in data["per_class"]
        )
        report = cls.from_class_aps(per_class, float(data["iou_threshold"]))
        return report


def match_predictions(
    preds: Iterable[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    image_id: Hashable = "",
) -> MatchSet:
    """Greedy class-wise matching for one image.

    Predictions are visited in ranked order; each claims the still-unmatched
    ground truth of its class with the highest IoU, provided that IoU is at
    least ``iou_threshold``. Otherwise it is a false positive.
    """
    preds = list(preds)
    gts = list(gts)
    for p in preds:
        if not isinstance(p, Detection):
            raise InvalidDetection(f"expected Detection, got {type(p).__name__}")
    for g in gts:
        if not isinstance(g, GroundTruth):
            raise InvalidGroundTruth(f"expected GroundTruth, got {type(g).__name__}")

    gt_counts: dict[int, int] = defaultdict(int)
    gt_by_class: dict[int, list[int]] = defaultdict(list)
    for i, g in enumerate(gts):
        gt_counts[g.class_id] += 1
        gt_by_class[g.class_id].append(i)

    taken: set[int] = set()
    out = []
    for p in sorted(preds, key=rank_key):
        best, best_iou = None, -1.0
        for i in gt_by_class.get(p.class_id, ()):
            if i in taken:
                continue
            o = iou(p.box, gts[i].box)
            if o > best_iou:
                best, best_iou = i, o
        if best is not None and best_iou >= iou_threshold:
            taken.add(best)
            out.append(PredictionMatch(p, True, (image_id, best), image_id))
        else:
            out.append(PredictionMatch(p, False, None, image_id))
    return MatchSet(tuple(out), dict(gt_counts))


def pool_matches(per_image: Iterable[MatchSet]) -> MatchSet:
    """Merge per-image match sets and re-rank globally by confidence."""
    matches = []
    gt_counts: dict[int, int] = defaultdict(int)
    for ms in per_image:
        matches.extend(ms.matches)
        for k, n in ms.gt_counts.items():
            gt_counts[k] += n
    matches.sort(key=lambda m: rank_key(m.detection) + (str(m.image_id),))
    return MatchSet(tuple(matches), dict(gt_counts))


def precision_recall(matches: MatchSet) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (recall, precision) at every rank of a single-class match set."""
    gt_count = sum(matches.gt_counts.values())
    if gt_count <= 0:
        raise NoGroundTruth("precision/recall needs at least one ground-truth instance")
    tp = np.array([m.is_true_positive for m in matches.matches], dtype=float)
    ctp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1, dtype=float)
    return ctp / gt_count, ctp / ranks if len(tp) else np.zeros(0)


def average_precision(matches: MatchSet, interpolation: str = ALL_POINT) -> float:
    """Area under the interpolated precision/recall curve of one class.

    With ``"all"`` the precision envelope (max precision at any recall at or
    beyond the current one) is summed over every recall step. ``"11point"``
    averages the envelope at recall 0, 0.1, ..., 1.0.
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    if len(matches.gt_counts) > 1:
        raise ValueError("average_precision expects a single-class match set")
    recall, precision = precision_recall(matches)
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    if interpolation == ELEVEN_POINT:
        total = 0.0
        for t in np.linspace(0.0, 1.0, 11):
            above = envelope[recall >= t - 1e-12]
            total += above.max() if above.size else 0.0
        return float(total / 11.0)
    steps = np.diff(np.concatenate([[0.0], recall]))
    ap = float(math.fsum(steps * envelope))
    return min(max(ap, 0.0), 1.0)


def class_matches(
    preds: Mapping[Hashable, Sequence[Detection]],
    gts: Mapping[Hashable, Sequence[GroundTruth]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> MatchSet:
    """Match every image and pool the results into one ranked match set."""
    images = sorted(set(preds) | set(gts), key=str)
    per_image = [
        match_predictions(preds.get(im, ()), gts.get(im, ()), iou_threshold, im)
        for im in images
    ]
    return pool_matches(per_image)


def evaluate(
    preds: Mapping[Hashable, Sequence[Detection]],
    gts: Mapping[Hashable, Sequence[GroundTruth]],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    class_ids: Optional[Iterable[int]] = None,
    interpolation: str = ALL_POINT,
) -> EvalReport:
    """Per-class AP and mAP over a set of images.

    ``class_ids`` fixes the reported classes (e.g. the full registry);
    by default every class present in predictions or ground truth is listed.
    """
    pooled = class_matches(preds, gts, iou_threshold)
    classes = sorted(set(class_ids)) if class_ids is not None else pooled.classes
    per_class = []
    for k in classes:
        ms = pooled.for_class(k)
        n_gt = ms.gt_counts[k]
        ap = average_precision(ms, interpolation) if n_gt else None
        per_class.append(ClassAp(k, ap, n_gt, len(ms.matches)))
    return EvalReport.from_class_aps(per_class, iou_threshold)


@dataclass(frozen=True)
class EpochSeries:
    entries: tuple[tuple[int, EvalReport], ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        object.__setattr__(self, "entries", entries)
        prev = 0
        for epoch, _ in entries:
            if epoch < 1 or epoch <= prev:
                raise ValueError("epoch indices must be positive and strictly increasing")
            prev = epoch


def select_best_epoch(series: EpochSeries) -> int:
    """Epoch with the highest mAP; the earliest wins ties."""
    if not series.entries:
        raise EmptySeries("cannot select a checkpoint from an empty series")
    best_epoch, best_map = series.entries[0][0], series.entries[0][1].map
    for epoch, report in series.entries[1:]:
        if report.map > best_map:
            best_epoch, best_map = epoch, report.map
    return best_epoch
