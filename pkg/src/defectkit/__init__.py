"""Post-processing toolkit for defect detectors: fusion, evaluation, ensembling, augmentation."""

from .errors import DefectKitError
from .geometry import AbsBox, ImageSize, NormBox, iou, to_absolute, to_normalized
from .fusion import Detection, FusionParams, combine, nms, wbf
from .evaluation import (
    ClassAp,
    EpochSeries,
    EvalReport,
    GroundTruth,
    MatchSet,
    average_precision,
    evaluate,
    match_predictions,
    select_best_epoch,
)
from .ensemble import (
    EnsembleSpec,
    ModelRun,
    SelectionPolicy,
    evaluate_ensemble,
    pool_predictions,
    relative_improvement,
    select_per_class_best,
)

__version__ = "0.1.0"
