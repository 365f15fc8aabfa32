"""Command-line entry point: ``defectkit <subcommand> ...``.

Exit status is 0 on success, 1 on invalid input (one-line diagnostic on
stderr) and 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from . import __version__
from .augment import AugmentPipeline, apply_pipeline, default_pipeline, load_labeled_image, save_labeled_image
from .ensemble import (
    AUTO,
    DEFAULT_MARGIN,
    SPLITS as REPORT_SPLITS,
    EnsembleSpec,
    ModelRun,
    SelectionPolicy,
    fuse_ensemble,
    relative_improvement,
    select_per_class_best,
)
from .errors import DefectKitError
from .evaluation import ALL_POINT, DEFAULT_IOU_THRESHOLD, INTERPOLATIONS, EvalReport, class_matches, evaluate
from .fusion import METHODS, NMS, WBF, FusionParams, combine
from .geometry import ImageSize
from .io import (
    ClassRegistry,
    DatasetManifest,
    ReportDoc,
    SweepManifest,
    dataset_stats,
    fmt3,
    image_size_of,
    read_label_dir,
    read_prediction_dir,
    read_report_json,
    render_report,
    write_prediction_dir,
    write_report_json,
)

THREADS_ENV = "DEFECTKIT_THREADS"


def _threads(value) -> int:
    if value is not None:
        return value
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        raise DefectKitError(f"{THREADS_ENV} must be an integer") from None


def _pmap(fn, items, threads):
    items = list(items)
    if threads <= 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


# --------------------------------------------------------------------------
# argument types


def _ratio_open(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in (0, 1)")
    return v


def _unit(text):
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _nonneg(text):
    v = float(text)
    if not v >= 0.0:
        raise argparse.ArgumentTypeError(f"{text} must be non-negative")
    return v


def _margin(text):
    if text.lower() in ("inf", "baseline-only"):
        return math.inf
    return _nonneg(text)


def _size(text):
    try:
        return ImageSize.parse(text)
    except DefectKitError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _weight(text):
    name, sep, w = text.rpartition("=")
    if not sep or not name:
        raise argparse.ArgumentTypeError(f"expected MODEL=WEIGHT, got {text!r}")
    try:
        value = float(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad weight in {text!r}") from None
    if not value > 0:
        raise argparse.ArgumentTypeError(f"weight in {text!r} must be positive")
    return name, value


def _hsv(text):
    parts = text.split(",")
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected H,S,V gains")
    vals = tuple(float(p) for p in parts)
    if not all(0.0 <= v <= 1.0 for v in vals):
        raise argparse.ArgumentTypeError("HSV gains must lie in [0, 1]")
    return vals


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _seed(text):
    v = int(text)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return v


# --------------------------------------------------------------------------
# shared loading


def _registry(args) -> ClassRegistry:
    if getattr(args, "classes", None) is None:
        return ClassRegistry()
    path = Path(args.classes)
    if path.suffix == ".json":
        return ClassRegistry.from_dict(json.loads(path.read_text()))
    return ClassRegistry(tuple(n for n in path.read_text().split() if n))


def _sizes(args):
    """(default size, per-image sizes) from --size / --images."""
    sizes = None
    if getattr(args, "images", None):
        sizes = {}
        for p in sorted(Path(args.images).iterdir()):
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
                sizes[p.stem] = image_size_of(p)
    return args.size, sizes


def _add_size_args(p):
    p.add_argument("--size", type=_size, default=ImageSize(1024, 1024),
                   help="image size WxH used to convert normalized boxes (default 1024x1024)")
    p.add_argument("--images", help="directory of images; their sizes override --size per image stem")
    p.add_argument("--classes", help="class names file (whitespace separated) or registry JSON")
    p.add_argument("--threads", type=_positive_int, default=None,
                   help=f"worker threads (default ${THREADS_ENV} or 1)")


def _add_fusion_args(p, default_method=NMS):
    p.add_argument("--method", choices=METHODS, default=default_method)
    p.add_argument("--fuse-iou", "--iou-fuse", dest="fuse_iou", type=_ratio_open, default=None,
                   help="fusion IoU threshold (default 0.45 for nms, 0.55 for wbf)")
    p.add_argument("--skip", type=_unit, default=0.0, help="WBF confidence pre-filter")
    p.add_argument("--weights", type=_weight, nargs="+", default=None, metavar="MODEL=W",
                   help="per-model WBF weights (default equal)")


def _load_models(paths, registry, size, sizes, threads):
    def load(path):
        return read_prediction_dir(path, registry, size, sizes)

    loaded = _pmap(load, paths, threads)
    ids = [Path(p).stem for p in paths]
    if len(set(ids)) != len(ids):
        raise DefectKitError(f"prediction sources must have distinct names, got {ids}")
    return dict(zip(ids, loaded))


def _fusion_params(args, n_models) -> FusionParams:
    weights = dict(args.weights) if args.weights else None
    return FusionParams(args.method, args.fuse_iou, args.skip, weights, n_models)


def _fusion_header(params: FusionParams) -> dict:
    h = {"fusion": params.method, "fusion IoU threshold": f"{params.iou_threshold:g}"}
    if params.method == WBF:
        h["skip confidence"] = f"{params.skip_confidence:g}"
        h["models (T)"] = str(params.model_count)
    return h


def _write_tables(table, out: Path, figures: bool, docs, registry, baseline_id, matches=None):
    """Write markdown at ``out``, CSV and figures next to it."""
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(table.markdown)
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(table.csv)
    written = [out, csv_path]
    if figures:
        from .plotting import plot_class_ap, plot_pr_curves

        written.append(plot_class_ap(docs, out.with_name(out.stem + "_ap.png"), registry, baseline_id))
        if matches is not None:
            written.append(plot_pr_curves(matches, out.with_name(out.stem + "_pr.png"), registry))
    return written


# --------------------------------------------------------------------------
# subcommands


def cmd_fuse(args):
    registry = _registry(args)
    size, sizes = _sizes(args)
    threads = _threads(args.threads)
    models = _load_models(args.preds, registry, size, sizes, threads)
    params = _fusion_params(args, len(models))
    images = sorted(set().union(*(m.keys() for m in models.values())))
    runs = [ModelRun(mid, {im: preds.get(im, []) for im in images}) for mid, preds in models.items()]

    def fuse(im):
        pooled = [d for run in runs for d in run.predictions[im]]
        return im, combine(pooled, params)

    fused = dict(_pmap(fuse, images, threads))
    write_prediction_dir(args.out, fused, size, sizes)
    print(f"fused {len(images)} image{'s' * (len(images) != 1)} from {len(models)} model(s) with {params.method} "
          f"(IoU {params.iou_threshold:g}) -> {args.out}")
    return 0


def _eval_header(args):
    return {"interpolation": args.interp}


def cmd_eval(args):
    registry = _registry(args)
    size, sizes = _sizes(args)
    threads = _threads(args.threads)
    gts = read_label_dir(args.gt, registry, size, sizes)
    preds = read_prediction_dir(args.preds, registry, size, sizes)
    unknown = sorted(set(preds) - set(gts))
    if unknown and not args.allow_extra:
        raise DefectKitError(f"predictions for images without labels: {unknown[:5]}")
    report = evaluate(preds, gts, args.iou, registry.ids, args.interp)
    run_id = Path(args.preds).stem
    doc = ReportDoc(run_id, report)
    table = render_report([doc], None, registry, title=f"Evaluation of {run_id}", header=_eval_header(args))
    print(table.markdown, end="")
    print(f"mAP@{args.iou:g} = {fmt3(report.map)}")
    if args.report:
        out = Path(args.report)
        matches = class_matches(preds, gts, args.iou)
        _write_tables(table, out, not args.no_figures, [doc], registry, None, matches)
        write_report_json(out.with_suffix(".json"), report, registry, run_id=run_id, interpolation=args.interp)
    return 0


def cmd_ensemble(args):
    registry = _registry(args)
    size, sizes = _sizes(args)
    threads = _threads(args.threads)
    gts = read_label_dir(args.gt, registry, size, sizes)
    models = _load_models(args.preds, registry, size, sizes, threads)
    images = sorted(gts)
    runs = [ModelRun(mid, {im: preds.get(im, []) for im in images}) for mid, preds in models.items()]
    params = _fusion_params(args, len(runs))
    spec = EnsembleSpec(tuple(r.model_id for r in runs), params)
    fused = fuse_ensemble(spec, runs, images)
    report = evaluate(fused, gts, args.iou, registry.ids, args.interp)
    docs = [ReportDoc(r.model_id, evaluate(r.predictions, gts, args.iou, registry.ids, args.interp)) for r in runs]
    ens_id = "+".join(spec.member_ids) + f" ({params.method})"
    docs.append(ReportDoc(ens_id, report))
    baseline = runs[0].model_id
    header = dict(_fusion_header(params), interpolation=args.interp)
    table = render_report(docs, baseline, registry, title="Ensemble evaluation", header=header)
    print(table.markdown, end="")
    imp = relative_improvement(report, docs[0].report)
    print(f"ensemble mAP@{args.iou:g} = {fmt3(report.map)} "
          f"({imp.two_decimals:+}% vs {baseline}, ~{imp.rounded:+}%)")
    if args.out_preds:
        write_prediction_dir(args.out_preds, fused, size, sizes)
    if args.report:
        out = Path(args.report)
        matches = class_matches(fused, gts, args.iou)
        _write_tables(table, out, not args.no_figures, docs, registry, baseline, matches)
        write_report_json(out.with_suffix(".json"), report, registry, run_id=ens_id,
                          members=list(spec.member_ids), method=params.method,
                          fusion_iou_threshold=params.iou_threshold)
    return 0


def _sweep_runs(sweep: SweepManifest) -> list[ModelRun]:
    return [
        ModelRun(r.model_id, validation_report=r.reports.get("validation"), test_report=r.reports.get("test"))
        for r in sweep.runs
    ]


def cmd_select(args):
    sweep = SweepManifest.load(args.sweep)
    policy = SelectionPolicy(args.baseline, args.margin)
    spec = select_per_class_best(_sweep_runs(sweep), policy, args.split, args.method)
    for m in spec.member_ids:
        print(m)
    if args.out:
        data = {
            "members": list(spec.member_ids),
            "method": spec.fusion.method,
            "fusion_iou_threshold": spec.fusion.iou_threshold,
            "baseline": args.baseline,
            "margin": None if math.isinf(args.margin) else args.margin,
            "split": args.split,
        }
        Path(args.out).write_text(json.dumps(data, indent=1) + "\n")
    return 0


def cmd_augment(args):
    registry = _registry(args)
    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
        entries = manifest.splits.get(args.split)
        if entries is None:
            raise DefectKitError(f"manifest has no split {args.split!r}")
        pairs = [(manifest.resolve(e.image), manifest.resolve(e.labels)) for e in entries]
    elif args.image_dir and args.labels:
        pairs = []
        for p in sorted(Path(args.image_dir).iterdir()):
            if p.suffix.lower() in (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"):
                pairs.append((p, Path(args.labels) / f"{p.stem}.txt"))
    else:
        raise DefectKitError("augment needs --manifest or both --image-dir and --labels")
    threads = _threads(args.threads)
    dataset = _pmap(lambda pl: load_labeled_image(pl[0], pl[1], registry), pairs, threads)

    if args.pipeline:
        pipeline = AugmentPipeline.from_dict(json.loads(Path(args.pipeline).read_text()))
        if args.seed is not None:
            pipeline = AugmentPipeline(pipeline.ops, args.seed)
    else:
        overrides = {k: v for k, v in (
            ("mosaic", args.mosaic), ("vflip", args.vflip), ("hflip", args.hflip), ("scale", args.scale),
            ("translate", args.translate), ("rotate", args.degrees), ("shear", args.shear), ("hsv", args.hsv),
        ) if v is not None}
        pipeline = default_pipeline(args.seed or 0, **overrides)

    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    augmented = apply_pipeline(dataset, pipeline)
    for img in augmented:
        save_labeled_image(img, out / "images" / f"{img.image_id}.png", out / "labels" / f"{img.image_id}.txt")
    (out / "pipeline.json").write_text(json.dumps(pipeline.to_dict(), indent=1) + "\n")
    print(f"augmented {len(augmented)} images (seed {pipeline.seed}) -> {out}")
    return 0


def cmd_stats(args):
    manifest = DatasetManifest.load(args.manifest)
    registry = _registry(args) if args.classes else manifest.registry
    stats = dataset_stats(manifest, registry)
    md = stats.render_markdown()
    print(md, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(md)
        out.with_suffix(".csv").write_text(stats.render_csv())
        if not args.no_figures:
            from .plotting import plot_dataset_stats

            plot_dataset_stats(stats, out.with_name(out.stem + "_counts.png"))
    return 0


def _report_source(text):
    label, sep, path = text.partition("=")
    return (label, path) if sep else (Path(text).stem, text)


def cmd_report(args):
    registry = _registry(args)
    docs = []
    if args.sweep:
        sweep = SweepManifest.load(args.sweep)
        registry = sweep.registry
        for r in sweep.runs:
            rep = r.reports.get(args.split) if args.split != AUTO else (
                r.reports.get("test") or r.reports.get("validation"))
            if rep is None:
                continue
            label = r.model_id if r.category == "baseline" else f"{r.hyperparameter} = {r.value}"
            docs.append(ReportDoc(r.model_id, rep, label, r.category))
    for src in args.reports or []:
        label, path = _report_source(src)
        docs.append(ReportDoc(label, read_report_json(path)))
    if not docs:
        raise DefectKitError("no reports to render (give --sweep and/or --reports)")
    wanted = args.baseline or ("default" if args.sweep else None)
    baseline = wanted if any(d.run_id == wanted for d in docs) else None
    if wanted and baseline is None:
        raise DefectKitError(f"baseline {wanted!r} not among the reports")
    table = render_report(docs, baseline, registry, title=args.title or "")
    print(table.markdown, end="")
    if args.out:
        _write_tables(table, Path(args.out), not args.no_figures, docs, registry, baseline)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="defectkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"defectkit {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("fuse", help="combine predictions of one or more models (NMS or WBF)")
    p.add_argument("--preds", nargs="+", required=True,
                   help="prediction directories or COCO JSON files, one per model")
    p.add_argument("--out", required=True, help="output directory for fused prediction files")
    _add_fusion_args(p)
    p.add_argument("--iou", dest="fuse_iou", type=_ratio_open, help="alias of --fuse-iou")
    _add_size_args(p)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="per-class AP and mAP against ground-truth labels")
    p.add_argument("--preds", required=True, help="prediction directory or COCO JSON file")
    p.add_argument("--gt", required=True, help="directory of YOLO label files")
    p.add_argument("--iou", type=_ratio_open, default=DEFAULT_IOU_THRESHOLD)
    p.add_argument("--interp", choices=INTERPOLATIONS, default=ALL_POINT)
    p.add_argument("--report", help="markdown report path; CSV, JSON and figures are written alongside")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--allow-extra", action="store_true", help="tolerate predictions for unlabeled images")
    _add_size_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="pool, fuse and evaluate several models")
    p.add_argument("--preds", nargs="+", required=True, help="one prediction source per member; first is the baseline")
    p.add_argument("--gt", required=True)
    p.add_argument("--iou", type=_ratio_open, default=DEFAULT_IOU_THRESHOLD, help="evaluation IoU threshold")
    p.add_argument("--interp", choices=INTERPOLATIONS, default=ALL_POINT)
    _add_fusion_args(p, default_method=WBF)
    p.add_argument("--report")
    p.add_argument("--out-preds", help="also write the fused predictions here")
    p.add_argument("--no-figures", action="store_true")
    _add_size_args(p)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("select", help="choose ensemble members by per-class-best AP")
    p.add_argument("--sweep", required=True, help="sweep manifest with per-run reports")
    p.add_argument("--baseline", default="default")
    p.add_argument("--margin", type=_margin, default=DEFAULT_MARGIN,
                   help="minimum AP advantage over the baseline ('inf' keeps the baseline only)")
    p.add_argument("--split", choices=REPORT_SPLITS, default=AUTO)
    p.add_argument("--method", choices=METHODS, default=WBF)
    p.add_argument("--out", help="write the ensemble spec as JSON")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("augment", help="write an augmented copy of a dataset")
    p.add_argument("--manifest", help="dataset manifest")
    p.add_argument("--split", default="train")
    p.add_argument("--image-dir", help="image directory (instead of --manifest)")
    p.add_argument("--labels", help="label directory matching --image-dir")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=_seed, default=None)
    p.add_argument("--pipeline", help="pipeline JSON ({seed, ops: [{kind, probability, magnitude}]})")
    p.add_argument("--mosaic", type=_unit, help="mosaic probability (default 1.0)")
    p.add_argument("--vflip", type=_unit, help="vertical flip probability (default 0.0)")
    p.add_argument("--hflip", type=_unit, help="horizontal flip probability (default 0.5)")
    p.add_argument("--scale", type=_nonneg, help="scale +/- gain (default 0.5)")
    p.add_argument("--translate", type=_nonneg, help="translation +/- fraction (default 0.2)")
    p.add_argument("--degrees", type=_nonneg, help="rotation +/- degrees (default 0)")
    p.add_argument("--shear", type=_nonneg, help="shear +/- degrees (default 0)")
    p.add_argument("--hsv", type=_hsv, help="HSV gains H,S,V (default 0.015,0.7,0.4)")
    p.add_argument("--classes")
    p.add_argument("--threads", type=_positive_int, default=None)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("stats", help="per-split, per-class instance counts of a dataset manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="markdown output path; CSV and a figure are written alongside")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--classes")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("report", help="render saved reports as a comparison table")
    p.add_argument("--reports", nargs="+", metavar="[LABEL=]REPORT.json")
    p.add_argument("--sweep", help="sweep manifest with per-run reports")
    p.add_argument("--split", choices=REPORT_SPLITS, default=AUTO)
    p.add_argument("--baseline", help="run whose cells anchor the bold marks (default: 'default' with --sweep)")
    p.add_argument("--title")
    p.add_argument("--out", help="markdown output path; CSV and figure are written alongside")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--classes")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DefectKitError, ValueError, OSError, KeyError) as exc:
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"defectkit {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
