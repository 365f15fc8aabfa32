"""Combining overlapping detections: class-wise NMS and Weighted Box Fusion."""
from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from .errors import InvalidDetection, UnknownModel
from .geometry import AbsBox, iou

NMS = "nms"
WBF = "wbf"
METHODS = (NMS, WBF)

DEFAULT_NMS_IOU = 0.45
DEFAULT_WBF_IOU = 0.55
DEFAULT_SKIP_CONFIDENCE = 0.0


@dataclass(frozen=True)
class Detection:
    box: AbsBox
    class_id: int
    confidence: float
    model_id: str = ""

    def __post_init__(self):
        if not isinstance(self.box, AbsBox):
            raise InvalidDetection(f"box must be an AbsBox, got {type(self.box).__name__}")
        if isinstance(self.class_id, bool) or not isinstance(self.class_id, int) or self.class_id < 0:
            raise InvalidDetection(f"class_id must be a non-negative integer, got {self.class_id!r}")
        c = self.confidence
        if not isinstance(c, (int, float)) or not math.isfinite(c) or not 0.0 <= c <= 1.0:
            raise InvalidDetection(f"confidence {c!r} outside [0, 1]")
        if self.box.width <= 0.0 or self.box.height <= 0.0:
            raise InvalidDetection(f"box {self.box.as_tuple()} has zero area")
        if not isinstance(self.model_id, str):
            raise InvalidDetection(f"model_id must be a string, got {self.model_id!r}")


def rank_key(d: Detection):
    """Total order used wherever detections are ranked by confidence.

    Ties in confidence fall back to smaller x1, smaller y1, model_id, then the
    remaining coordinates and class so that every ordering is reproducible.
    """
    b = d.box
    return (-d.confidence, b.x1, b.y1, d.model_id, b.x2, b.y2, d.class_id)


@dataclass(frozen=True)
class FusionParams:
    """Parameters for :func:`combine`.

    ``iou_threshold`` defaults per method (0.45 for NMS, 0.55 for WBF).
    ``model_weights`` of ``None`` means every model has weight 1.
    ``model_count`` is the number of models pooled into the input.
    """

    method: str = NMS
    iou_threshold: Optional[float] = None
    skip_confidence: float = DEFAULT_SKIP_CONFIDENCE
    model_weights: Optional[Mapping[str, float]] = None
    model_count: int = 1

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown fusion method {self.method!r}, expected one of {METHODS}")
        if self.iou_threshold is None:
            default = DEFAULT_NMS_IOU if self.method == NMS else DEFAULT_WBF_IOU
            object.__setattr__(self, "iou_threshold", default)
        if not 0.0 < self.iou_threshold < 1.0:
            raise ValueError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")
        if not 0.0 <= self.skip_confidence <= 1.0:
            raise ValueError(f"skip_confidence must lie in [0, 1], got {self.skip_confidence}")
        if self.model_weights is not None:
            weights = dict(self.model_weights)
            if not weights:
                raise ValueError("model_weights must not be empty")
            for k, w in weights.items():
                if not (math.isfinite(w) and w > 0.0):
                    raise ValueError(f"weight for model {k!r} must be positive, got {w}")
            object.__setattr__(self, "model_weights", weights)
        if isinstance(self.model_count, bool) or not isinstance(self.model_count, int) or self.model_count < 1:
            raise ValueError(f"model_count must be a positive integer, got {self.model_count!r}")


def _validated(dets: Iterable[Detection]) -> list[Detection]:
    out = list(dets)
    for d in out:
        if not isinstance(d, Detection):
            raise InvalidDetection(f"expected Detection, got {type(d).__name__}")
    return out


def _by_class(dets: Sequence[Detection]) -> dict[int, list[Detection]]:
    groups: dict[int, list[Detection]] = defaultdict(list)
    for d in dets:
        groups[d.class_id].append(d)
    return groups


def nms(dets: Iterable[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[Detection]:
    """Class-wise greedy non-maximum suppression.

    A box survives if its IoU with every higher-ranked surviving box of the
    same class is at most ``iou_threshold``. Output is ranked by
    :func:`rank_key`, so it does not depend on the input order.
    """
    dets = _validated(dets)
    kept: list[Detection] = []
    for group in _by_class(dets).values():
        survivors: list[Detection] = []
        for d in sorted(group, key=rank_key):
            if all(iou(d.box, s.box) <= iou_threshold for s in survivors):
                survivors.append(d)
        kept.extend(survivors)
    kept.sort(key=rank_key)
    return kept


class _Cluster:
    __slots__ = ("members", "weights", "box")

    def __init__(self, det: Detection, weighted_conf: float):
        self.members = [det]
        self.weights = [weighted_conf]
        self.box = det.box

    def add(self, det: Detection, weighted_conf: float):
        self.members.append(det)
        self.weights.append(weighted_conf)
        self.box = self._mean_box()

    def _mean_box(self) -> AbsBox:
        total = math.fsum(self.weights)
        coords = []
        for attr in ("x1", "y1", "x2", "y2"):
            coords.append(math.fsum(c * getattr(d.box, attr) for c, d in zip(self.weights, self.members)) / total)
        return AbsBox(*coords)


def _normalized_weights(params: FusionParams, dets: Sequence[Detection]) -> dict[str, float]:
    if params.model_weights is None:
        return defaultdict(lambda: 1.0)
    weights = params.model_weights
    for d in dets:
        if d.model_id not in weights:
            raise UnknownModel(f"no fusion weight for model {d.model_id!r}")
    mean = math.fsum(weights.values()) / len(weights)
    return {k: w / mean for k, w in weights.items()}


def wbf(dets: Iterable[Detection], params: FusionParams) -> list[Detection]:
    """Weighted Box Fusion.

    Per class: detections below ``skip_confidence`` are dropped, confidences
    are scaled by the model weight (normalized to mean 1), and boxes are
    visited in descending weighted confidence. Each joins the cluster whose
    running fused box it overlaps most, if that IoU exceeds the threshold,
    and otherwise seeds a new cluster. Fused coordinates are the
    confidence-weighted mean of the members; fused confidence is the mean
    member confidence times ``min(n, T) / T`` for ``n`` members and
    ``T = params.model_count``, capped at 1.

    Singleton clusters pass through unchanged (coordinates and model_id).
    Larger clusters carry the sorted member model ids joined with ``+``.
    """
    dets = _validated(dets)
    weights = _normalized_weights(params, dets)
    T = params.model_count
    fused: list[Detection] = []
    for class_id, group in _by_class(dets).items():
        scored = [
            (d.confidence * weights[d.model_id], d)
            for d in group
            if d.confidence >= params.skip_confidence
        ]
        scored.sort(key=lambda cd: (-cd[0],) + rank_key(cd[1])[1:])
        clusters: list[_Cluster] = []
        for conf, d in scored:
            best, best_iou = None, -1.0
            for cl in clusters:
                o = iou(d.box, cl.box)
                if o > best_iou:
                    best, best_iou = cl, o
            if best is not None and best_iou > params.iou_threshold:
                best.add(d, conf)
            else:
                clusters.append(_Cluster(d, conf))
        for cl in clusters:
            n = len(cl.members)
            conf = math.fsum(cl.weights) / n * (min(n, T) / T)
            conf = min(conf, 1.0)
            if n == 1:
                model_id = cl.members[0].model_id
            else:
                model_id = "+".join(sorted({m.model_id for m in cl.members}))
            fused.append(Detection(cl.box, class_id, conf, model_id))
    fused.sort(key=rank_key)
    return fused


def combine(dets: Iterable[Detection], params: FusionParams) -> list[Detection]:
    """Dispatch to :func:`nms` or :func:`wbf` according to ``params.method``."""
    if params.method == NMS:
        return nms(dets, params.iou_threshold)
    return wbf(dets, params)
