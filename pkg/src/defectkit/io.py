"""File formats, class registry, manifests, dataset statistics and table rendering.

Label files follow the YOLO text layout, one box per line::

    <class_id> <cx> <cy> <w> <h>

with coordinates as fractions of the image size. Prediction files append a
confidence column. Manifests are JSON documents with a ``schema`` field.
"""
from __future__ import annotations

import csv
import io as _stdio
import json
import math
import os
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from pathlib import Path
from typing import Hashable, Iterable, Mapping, Optional, Sequence

from .errors import (
    ConfidenceOutOfRange,
    DefectKitError,
    MalformedBox,
    MixedThresholds,
    ParseError,
    UnknownClass,
)
from .evaluation import EvalReport, GroundTruth
from .fusion import Detection
from .geometry import AbsBox, ImageSize, NormBox, to_absolute, to_normalized

DATASET_SCHEMA = "defectkit.dataset/1"
SWEEP_SCHEMA = "defectkit.sweep/1"
SPLITS = ("train", "validation", "test")

DEFAULT_CLASSES = ("microbridge", "gap", "bridge", "line_collapse", "p_gap")
DEFAULT_ALIASES = {"probable_gap": "p_gap"}


def _canonical(name: str) -> str:
    return "_".join(name.strip().lower().replace("-", " ").replace("_", " ").split())


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered class names; a name's position is its class id."""

    names: tuple[str, ...] = DEFAULT_CLASSES
    aliases: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_ALIASES))

    def __post_init__(self):
        names = tuple(_canonical(n) for n in self.names)
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate class names in registry: {self.names}")
        aliases = {_canonical(k): _canonical(v) for k, v in self.aliases.items()}
        for k, v in aliases.items():
            if v not in names:
                raise ValueError(f"alias {k!r} points at unknown class {v!r}")
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "aliases", aliases)

    def __len__(self):
        return len(self.names)

    def __contains__(self, class_id) -> bool:
        return isinstance(class_id, int) and 0 <= class_id < len(self.names)

    @property
    def ids(self) -> list[int]:
        return list(range(len(self.names)))

    def id_of(self, name: str) -> int:
        key = _canonical(name)
        key = self.aliases.get(key, key)
        try:
            return self.names.index(key)
        except ValueError:
            raise UnknownClass(f"unknown class name {name!r}") from None

    def name_of(self, class_id: int) -> str:
        if class_id not in self:
            raise UnknownClass(f"class id {class_id!r} not in registry of {len(self)} classes")
        return self.names[class_id]

    def check(self, class_id: int) -> int:
        if class_id not in self:
            raise UnknownClass(f"class id {class_id} not in registry of {len(self)} classes")
        return class_id

    def to_dict(self) -> dict:
        return {"names": list(self.names), "aliases": dict(self.aliases)}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ClassRegistry":
        return cls(tuple(data["names"]), dict(data.get("aliases", {})))


# --------------------------------------------------------------------------
# Label and prediction text


def _parse_lines(text: str, ncols: int, source=None):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} fields, got {len(parts)}", lineno, source)
        try:
            class_id = int(parts[0])
        except ValueError:
            raise ParseError(f"class id {parts[0]!r} is not an integer", lineno, source) from None
        try:
            values = [float(p) for p in parts[1:]]
        except ValueError:
            raise ParseError(f"non-numeric field in {line!r}", lineno, source) from None
        yield lineno, class_id, values


def _norm_box(values, lineno, source) -> NormBox:
    try:
        return NormBox(*values[:4])
    except MalformedBox as exc:
        raise MalformedBox(f"{source or ''}:{lineno}: {exc}") from None


def _check_class(registry, class_id, lineno, source):
    if class_id not in registry:
        raise UnknownClass(f"{source or ''}:{lineno}: class id {class_id} not in registry")


def parse_yolo_labels(
    text: str,
    size: ImageSize,
    registry: ClassRegistry = ClassRegistry(),
    image_id: Hashable = "",
    source=None,
) -> list[GroundTruth]:
    out = []
    for lineno, class_id, values in _parse_lines(text, 5, source):
        _check_class(registry, class_id, lineno, source)
        box = to_absolute(_norm_box(values, lineno, source), size)
        if box.width <= 0 or box.height <= 0:
            raise MalformedBox(f"{source or ''}:{lineno}: box collapses to zero area")
        out.append(GroundTruth(box, class_id, image_id))
    return out


def parse_predictions(
    text: str,
    size: ImageSize,
    registry: ClassRegistry = ClassRegistry(),
    model_id: str = "",
    source=None,
) -> list[Detection]:
    out = []
    for lineno, class_id, values in _parse_lines(text, 6, source):
        _check_class(registry, class_id, lineno, source)
        conf = values[4]
        if not (math.isfinite(conf) and 0.0 <= conf <= 1.0):
            raise ConfidenceOutOfRange(f"{source or ''}:{lineno}: confidence {conf} outside [0, 1]")
        box = to_absolute(_norm_box(values, lineno, source), size)
        if box.width <= 0 or box.height <= 0:
            raise MalformedBox(f"{source or ''}:{lineno}: box collapses to zero area")
        out.append(Detection(box, class_id, conf, model_id))
    return out


def parse_coco_detections(
    data,
    registry: ClassRegistry = ClassRegistry(),
    model_id: str = "",
    sizes: Optional[Mapping[Hashable, ImageSize]] = None,
) -> dict[Hashable, list[Detection]]:
    """Read ``[{image_id, category_id, bbox: [x, y, w, h], score}, ...]``.

    ``data`` may be JSON text or the already-decoded list. Boxes are in
    pixels. When ``sizes`` is given, boxes are clipped to their image frame.
    """
    if isinstance(data, (str, bytes)):
        try:
            data = json.loads(data)
        except json.JSONDecodeError as exc:
            raise ParseError(f"invalid JSON: {exc}") from None
    if not isinstance(data, list):
        raise ParseError("COCO detections must be a JSON list")
    out: dict[Hashable, list[Detection]] = {}
    for i, rec in enumerate(data):
        try:
            image_id = rec["image_id"]
            class_id = rec["category_id"]
            x, y, w, h = (float(v) for v in rec["bbox"])
            score = float(rec["score"])
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"record {i} lacks image_id/category_id/bbox/score") from None
        if isinstance(class_id, bool) or not isinstance(class_id, int) or class_id not in registry:
            raise UnknownClass(f"record {i}: category {class_id!r} not in registry")
        if not (math.isfinite(score) and 0.0 <= score <= 1.0):
            raise ConfidenceOutOfRange(f"record {i}: score {score} outside [0, 1]")
        if not (w > 0 and h > 0):
            raise MalformedBox(f"record {i}: non-positive box size")
        box = AbsBox(x, y, x + w, y + h)
        if sizes is not None and image_id in sizes:
            s = sizes[image_id]
            box = box.clipped(s.width, s.height)
            if box.width <= 0 or box.height <= 0:
                raise MalformedBox(f"record {i}: box lies outside the image")
        out.setdefault(image_id, []).append(Detection(box, class_id, score, model_id))
    return out


def _fmt(v: float) -> str:
    s = f"{v:.6f}"
    return "0.000000" if s == "-0.000000" else s


def format_label_line(class_id: int, n: NormBox, confidence: Optional[float] = None) -> str:
    fields = [str(class_id)] + [_fmt(v) for v in n.as_tuple()]
    if confidence is not None:
        fields.append(_fmt(confidence))
    return " ".join(fields)


def serialize_labels(gts: Iterable[GroundTruth], size: ImageSize) -> str:
    return "".join(format_label_line(g.class_id, to_normalized(g.box, size)) + "\n" for g in gts)


def serialize_predictions(dets: Iterable[Detection], size: ImageSize) -> str:
    return "".join(
        format_label_line(d.class_id, to_normalized(d.box, size), d.confidence) + "\n" for d in dets
    )


def normalize_text(text: str) -> str:
    """Canonical form of a label/prediction file: 6-decimal fields, one line per box."""
    lines = []
    for raw in text.splitlines():
        parts = raw.split()
        if not parts:
            continue
        lines.append(" ".join([str(int(parts[0]))] + [_fmt(float(p)) for p in parts[1:]]))
    return "".join(l + "\n" for l in lines)


# --------------------------------------------------------------------------
# Directory helpers


def image_size_of(path) -> ImageSize:
    from PIL import Image

    with Image.open(path) as im:
        return ImageSize(*im.size)


def read_label_dir(
    directory,
    registry: ClassRegistry = ClassRegistry(),
    size: Optional[ImageSize] = None,
    sizes: Optional[Mapping[str, ImageSize]] = None,
) -> dict[str, list[GroundTruth]]:
    out = {}
    for path in sorted(Path(directory).glob("*.txt")):
        image_id = path.stem
        s = (sizes or {}).get(image_id, size)
        if s is None:
            raise DefectKitError(f"no image size known for {path}")
        out[image_id] = parse_yolo_labels(path.read_text(), s, registry, image_id, source=str(path))
    return out


def read_prediction_dir(
    directory,
    registry: ClassRegistry = ClassRegistry(),
    size: Optional[ImageSize] = None,
    sizes: Optional[Mapping[str, ImageSize]] = None,
    model_id: Optional[str] = None,
) -> dict[str, list[Detection]]:
    """Read one model's predictions (a directory of text files or a COCO JSON file)."""
    directory = Path(directory)
    model_id = directory.stem if model_id is None else model_id
    if directory.is_file():
        return {str(k): v for k, v in parse_coco_detections(directory.read_text(), registry, model_id, sizes).items()}
    if not directory.is_dir():
        raise DefectKitError(f"prediction path {directory} does not exist")
    out = {}
    for path in sorted(directory.glob("*.txt")):
        s = (sizes or {}).get(path.stem, size)
        if s is None:
            raise DefectKitError(f"no image size known for {path}")
        out[path.stem] = parse_predictions(path.read_text(), s, registry, model_id, source=str(path))
    return out


def write_prediction_dir(directory, preds: Mapping[str, Sequence[Detection]], size=None, sizes=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for image_id in sorted(preds, key=str):
        s = (sizes or {}).get(image_id, size)
        (directory / f"{image_id}.txt").write_text(serialize_predictions(preds[image_id], s))


# --------------------------------------------------------------------------
# Manifests


@dataclass(frozen=True)
class ManifestEntry:
    image: str
    labels: str
    size: ImageSize


@dataclass
class DatasetManifest:
    splits: dict[str, list[ManifestEntry]] = field(default_factory=dict)
    registry: ClassRegistry = field(default_factory=ClassRegistry)
    root: Path = Path(".")

    def __post_init__(self):
        for split, entries in self.splits.items():
            for kind in ("image", "labels"):
                paths = [getattr(e, kind) for e in entries]
                if len(set(paths)) != len(paths):
                    raise ParseError(f"duplicate {kind} paths in split {split!r}")

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def to_dict(self) -> dict:
        return {
            "schema": DATASET_SCHEMA,
            "classes": self.registry.to_dict(),
            "splits": {
                split: [
                    {"image": e.image, "labels": e.labels, "width": e.size.width, "height": e.size.height}
                    for e in entries
                ]
                for split, entries in self.splits.items()
            },
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, data: Mapping, root=Path(".")) -> "DatasetManifest":
        if data.get("schema") != DATASET_SCHEMA:
            raise ParseError(f"unsupported dataset manifest schema {data.get('schema')!r}")
        registry = ClassRegistry.from_dict(data["classes"]) if "classes" in data else ClassRegistry()
        splits = {}
        for split, entries in data.get("splits", {}).items():
            try:
                splits[split] = [
                    ManifestEntry(e["image"], e["labels"], ImageSize(int(e["width"]), int(e["height"])))
                    for e in entries
                ]
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad entry in split {split!r}: {exc}") from None
        return cls(splits, registry, Path(root))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        return cls.from_dict(_load_json(path), root=path.parent)


def _load_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc}", source=str(path)) from None


@dataclass(frozen=True)
class SweepRun:
    model_id: str
    hyperparameter: str
    value: str
    category: str = ""
    prediction_dir: str = ""
    notes: str = ""
    reports: Mapping[str, EvalReport] = field(default_factory=dict)


@dataclass
class SweepManifest:
    runs: list[SweepRun]
    registry: ClassRegistry = field(default_factory=ClassRegistry)
    root: Path = Path(".")
    notes: list[str] = field(default_factory=list)

    def __post_init__(self):
        ids = [r.model_id for r in self.runs]
        if len(set(ids)) != len(ids):
            raise ParseError(f"duplicate model ids in sweep manifest: {ids}")

    def run(self, model_id: str) -> SweepRun:
        for r in self.runs:
            if r.model_id == model_id:
                return r
        raise KeyError(model_id)

    def to_dict(self) -> dict:
        def rep(r: EvalReport) -> dict:
            return {
                "iou_threshold": r.iou_threshold,
                "ap": {self.registry.name_of(c.class_id): c.ap for c in r.per_class},
                "gt_count": {self.registry.name_of(c.class_id): c.gt_count for c in r.per_class},
            }

        return {
            "schema": SWEEP_SCHEMA,
            "classes": self.registry.to_dict(),
            "notes": list(self.notes),
            "runs": [
                {
                    "model_id": r.model_id,
                    "category": r.category,
                    "hyperparameter": r.hyperparameter,
                    "value": r.value,
                    "prediction_dir": r.prediction_dir,
                    "notes": r.notes,
                    "reports": {split: rep(x) for split, x in r.reports.items()},
                }
                for r in self.runs
            ],
        }

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def from_dict(cls, data: Mapping, root=Path(".")) -> "SweepManifest":
        if data.get("schema") != SWEEP_SCHEMA:
            raise ParseError(f"unsupported sweep manifest schema {data.get('schema')!r}")
        registry = ClassRegistry.from_dict(data["classes"]) if "classes" in data else ClassRegistry()
        runs = []
        for i, r in enumerate(data.get("runs", [])):
            try:
                reports = {}
                for split, rep in r.get("reports", {}).items():
                    gt = rep.get("gt_count", {})
                    aps = {registry.id_of(name): ap for name, ap in rep["ap"].items()}
                    counts = {registry.id_of(name): int(n) for name, n in gt.items()}
                    reports[split] = EvalReport.from_aps(aps, float(rep["iou_threshold"]), counts)
                runs.append(
                    SweepRun(
                        model_id=str(r["model_id"]),
                        hyperparameter=str(r.get("hyperparameter", "")),
                        value=str(r.get("value", "")),
                        category=str(r.get("category", "")),
                        prediction_dir=str(r.get("prediction_dir", "")),
                        notes=str(r.get("notes", "")),
                        reports=reports,
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise ParseError(f"bad run #{i} in sweep manifest: {exc}") from None
        return cls(runs, registry, Path(root), list(data.get("notes", [])))

    @classmethod
    def load(cls, path) -> "SweepManifest":
        path = Path(path)
        return cls.from_dict(_load_json(path), root=path.parent)


# --------------------------------------------------------------------------
# Dataset statistics


@dataclass(frozen=True)
class SplitStats:
    images: int
    instances: Mapping[int, int]

    @property
    def total_instances(self) -> int:
        return sum(self.instances.values())


@dataclass(frozen=True)
class DatasetStats:
    registry: ClassRegistry
    splits: Mapping[str, SplitStats]

    def render_markdown(self) -> str:
        splits = list(self.splits)
        head = "| Sample counts | " + " | ".join(s.title() for s in splits) + " |"
        sep = "|" + "---|" * (len(splits) + 1)
        rows = [head, sep]
        for k in self.registry.ids:
            name = self.registry.name_of(k)
            rows.append(f"| {name} | " + " | ".join(str(self.splits[s].instances[k]) for s in splits) + " |")
        rows.append("| Total instances | " + " | ".join(str(self.splits[s].total_instances) for s in splits) + " |")
        rows.append("| Total images | " + " | ".join(str(self.splits[s].images) for s in splits) + " |")
        return "\n".join(rows) + "\n"

    def render_csv(self) -> str:
        buf = _stdio.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        splits = list(self.splits)
        w.writerow(["class"] + splits)
        for k in self.registry.ids:
            w.writerow([self.registry.name_of(k)] + [self.splits[s].instances[k] for s in splits])
        w.writerow(["total_instances"] + [self.splits[s].total_instances for s in splits])
        w.writerow(["total_images"] + [self.splits[s].images for s in splits])
        return buf.getvalue()


def dataset_stats(manifest: DatasetManifest, registry: Optional[ClassRegistry] = None) -> DatasetStats:
    registry = registry or manifest.registry
    splits = {}
    names = [s for s in SPLITS if s in manifest.splits] + [s for s in manifest.splits if s not in SPLITS]
    if not names:
        names = list(SPLITS)
    for split in names:
        entries = manifest.splits.get(split, [])
        counts = {k: 0 for k in registry.ids}
        for e in entries:
            path = manifest.resolve(e.labels)
            try:
                text = path.read_text()
            except OSError as exc:
                raise DefectKitError(f"cannot read labels {path}: {exc.strerror}") from None
            for g in parse_yolo_labels(text, e.size, registry, source=str(path)):
                counts[g.class_id] += 1
        splits[split] = SplitStats(len(entries), counts)
    stats = DatasetStats(registry, splits)
    for s in stats.splits.values():
        assert s.total_instances == sum(s.instances[k] for k in registry.ids)
    return stats


# --------------------------------------------------------------------------
# Report tables


def fmt3(x: Optional[float]) -> str:
    """Three decimals, round-half-even on the shortest decimal repr of ``x``."""
    if x is None:
        return "-"
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


@dataclass(frozen=True)
class ReportDoc:
    run_id: str
    report: EvalReport
    label: str = ""
    group: str = ""

    @property
    def display(self) -> str:
        return self.label or self.run_id


@dataclass(frozen=True)
class RenderedTable:
    markdown: str
    csv: str
    marks: Mapping[str, tuple[str, ...]]


def _columns(docs: Sequence[ReportDoc]) -> list[int]:
    cols = docs[0].report.class_ids
    for d in docs[1:]:
        if d.report.class_ids != cols:
            raise ValueError(f"report {d.run_id!r} covers different classes")
    return cols


def _marks(docs: Sequence[ReportDoc], baseline_id: Optional[str], cols, keys) -> dict[str, tuple[str, ...]]:
    """Cells to emphasize.

    The baseline's cell is marked when no run beats it; another run's cell is
    marked when it is strictly better than the baseline's. Comparisons use
    the rendered 3-decimal values.
    """
    base = next((d for d in docs if d.run_id == baseline_id), None)
    marks: dict[str, tuple[str, ...]] = {}
    if base is None:
        return {d.run_id: () for d in docs}

    def value(doc, key):
        v = doc.report.map if key == "map" else doc.report.ap(key)
        return None if v is None else Decimal(fmt3(v))

    for d in docs:
        marked = []
        for key, name in zip(cols + ["map"], keys):
            mine, theirs = value(d, key), value(base, key)
            if mine is None or theirs is None:
                continue
            if d is base:
                others = [value(o, key) for o in docs if o is not base]
                if all(o is None or mine >= o for o in others):
                    marked.append(name)
            elif mine > theirs:
                marked.append(name)
        marks[d.run_id] = tuple(marked)
    return marks


def render_report(
    docs: Sequence[ReportDoc],
    baseline_id: Optional[str] = None,
    registry: ClassRegistry = ClassRegistry(),
    title: str = "",
    header: Optional[Mapping[str, str]] = None,
) -> RenderedTable:
    """Render one row per run: per-class AP columns then mAP, 3 decimals.

    Markdown output bolds the cells selected by the baseline rule; the CSV
    carries the same information in a ``marked`` column.
    """
    docs = list(docs)
    if not docs:
        raise ValueError("nothing to render")
    thresholds = {d.report.iou_threshold for d in docs}
    if len(thresholds) != 1:
        raise MixedThresholds(f"reports use different IoU thresholds: {sorted(thresholds)}")
    thr = thresholds.pop()
    cols = _columns(docs)
    keys = [registry.name_of(k) if k in registry else f"class_{k}" for k in cols] + ["mAP"]
    marks = _marks(docs, baseline_id, cols, keys)
    has_group = any(d.group for d in docs)

    lines = []
    if title:
        lines += [f"# {title}", ""]
    meta = {"IoU threshold": f"{thr:g}"}
    if baseline_id is not None:
        meta["baseline"] = baseline_id
    meta.update(header or {})
    for k, v in meta.items():
        lines.append(f"- {k}: {v}")
    lines.append("")
    head = (["group"] if has_group else []) + ["run"] + keys
    lines.append("| " + " | ".join(head) + " |")
    lines.append("|" + "---|" * len(head))

    buf = _stdio.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(head + ["marked"])
    for d in docs:
        values = [fmt3(d.report.ap(k)) for k in cols] + [fmt3(d.report.map)]
        cells = [f"**{v}**" if name in marks[d.run_id] else v for v, name in zip(values, keys)]
        prefix = ([d.group] if has_group else []) + [d.display]
        lines.append("| " + " | ".join(prefix + cells) + " |")
        w.writerow(prefix + values + [";".join(marks[d.run_id])])
    return RenderedTable("\n".join(lines) + "\n", buf.getvalue(), marks)


def write_report_json(path, report: EvalReport, registry: ClassRegistry = ClassRegistry(), **meta):
    data = report.to_dict()
    for c in data["per_class"]:
        c["name"] = registry.name_of(c["class_id"]) if c["class_id"] in registry else None
    data.update(meta)
    Path(path).write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


def read_report_json(path) -> EvalReport:
    data = _load_json(path)
    try:
        return EvalReport.from_dict(data)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad report: {exc}", source=str(path)) from None
