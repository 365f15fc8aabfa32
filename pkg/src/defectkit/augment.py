"""Label-preserving offline augmentation: flips, affine warps, HSV jitter, mosaic.

Images are ``uint8`` arrays of shape ``(height, width, 3)``. Every operator is
deterministic given its sampled parameters; randomness lives only in
:func:`apply_pipeline`, which derives one generator per image from
``(seed, image_id)``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from .errors import DegenerateTransform, EmptyDataset, SizeMismatch
from .geometry import AbsBox, ImageSize, NormBox, to_absolute, to_normalized

FILL_VALUE = 114
MIN_BOX_PIXELS = 2.0
MIN_AREA_RATIO = 0.1
MAX_ASPECT_RATIO = 20.0

# Label coordinates are snapped to multiples of 2**-53 so that 1 - x is exact
# and mirroring a label twice reproduces it bit for bit.
_GRID = float(2**53)


def _snap(x: float) -> float:
    return round(x * _GRID) / _GRID


@dataclass(frozen=True)
class Label:
    class_id: int
    box: NormBox


@dataclass(frozen=True, eq=False)
class LabeledImage:
    image: np.ndarray
    labels: tuple[Label, ...]
    image_id: str = ""

    def __post_init__(self):
        img = np.asarray(self.image)
        if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image must be uint8 of shape (H, W, 3), got {img.dtype} {img.shape}")
        if img.shape[0] < 1 or img.shape[1] < 1:
            raise ValueError("image must be at least 1x1")
        object.__setattr__(self, "image", img)
        labels = []
        for lab in self.labels:
            b = lab.box
            labels.append(Label(lab.class_id, NormBox(_snap(b.cx), _snap(b.cy), _snap(b.w), _snap(b.h))))
        object.__setattr__(self, "labels", tuple(labels))

    @property
    def size(self) -> ImageSize:
        return ImageSize(int(self.image.shape[1]), int(self.image.shape[0]))

    def abs_boxes(self) -> list[AbsBox]:
        return [to_absolute(l.box, self.size) for l in self.labels]

    def same_as(self, other: "LabeledImage") -> bool:
        """Bit-exact equality of raster, labels and id."""
        return (
            self.image_id == other.image_id
            and self.image.shape == other.image.shape
            and np.array_equal(self.image, other.image)
            and self.labels == other.labels
        )


VERTICAL = "vertical"
HORIZONTAL = "horizontal"


def flip(img: LabeledImage, axis: str) -> LabeledImage:
    """Mirror the raster; vertical maps cy to 1 - cy, horizontal maps cx to 1 - cx."""
    if axis == VERTICAL:
        raster = img.image[::-1]
        labels = [Label(l.class_id, replace(l.box, cy=1.0 - l.box.cy)) for l in img.labels]
    elif axis == HORIZONTAL:
        raster = img.image[:, ::-1]
        labels = [Label(l.class_id, replace(l.box, cx=1.0 - l.box.cx)) for l in img.labels]
    else:
        raise ValueError(f"unknown flip axis {axis!r}")
    return LabeledImage(np.ascontiguousarray(raster), tuple(labels), img.image_id)


# --------------------------------------------------------------------------
# Affine


@dataclass(frozen=True)
class AffineParams:
    """Concrete draws for one warp.

    ``scale`` is the factor itself (1 is identity), ``translate`` fractions of
    width/height, ``rotate`` and ``shear`` in degrees.
    """

    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)
    rotate: float = 0.0
    shear: tuple[float, float] = (0.0, 0.0)

    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.translate == (0.0, 0.0) and self.rotate == 0.0 and self.shear == (0.0, 0.0)


def _cos_sin(deg: float) -> tuple[float, float]:
    # exact values at quarter turns keep right-angle rotations free of rounding noise
    q, r = divmod(deg, 90.0)
    if r == 0.0:
        return [(1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0)][int(q) % 4]
    rad = math.radians(deg)
    return math.cos(rad), math.sin(rad)


def _tan(deg: float) -> float:
    return 0.0 if deg == 0.0 else math.tan(math.radians(deg))


def affine_matrix(params: AffineParams, size: ImageSize) -> np.ndarray:
    """3x3 matrix: recenter, rotate+scale, shear, translate, move back."""
    W, H = size.width, size.height
    C = np.eye(3)
    C[0, 2], C[1, 2] = -W / 2.0, -H / 2.0
    c, s = _cos_sin(params.rotate)
    R = np.eye(3)
    R[0, 0], R[0, 1] = params.scale * c, params.scale * s
    R[1, 0], R[1, 1] = -params.scale * s, params.scale * c
    S = np.eye(3)
    S[0, 1] = _tan(params.shear[0])
    S[1, 0] = _tan(params.shear[1])
    T = np.eye(3)
    T[0, 2] = (0.5 + params.translate[0]) * W
    T[1, 2] = (0.5 + params.translate[1]) * H
    return T @ S @ R @ C


def warp_raster(image: np.ndarray, M: np.ndarray, interpolation: str = "nearest") -> np.ndarray:
    """Inverse-map every output pixel center through ``M``; uncovered pixels get gray 114."""
    det = float(np.linalg.det(M[:2, :2]))
    if not abs(det) >= 1e-8:
        raise DegenerateTransform(f"affine determinant {det:g} is too small")
    if np.array_equal(M, np.eye(3)):
        return image.copy()
    H, W = image.shape[:2]
    Minv = np.linalg.inv(M)
    ys, xs = np.mgrid[0:H, 0:W]
    px = xs + 0.5
    py = ys + 0.5
    sx = Minv[0, 0] * px + Minv[0, 1] * py + Minv[0, 2]
    sy = Minv[1, 0] * px + Minv[1, 1] * py + Minv[1, 2]
    out = np.full_like(image, FILL_VALUE)
    if interpolation == "nearest":
        ix = np.floor(sx).astype(np.int64)
        iy = np.floor(sy).astype(np.int64)
        ok = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        out[ok] = image[iy[ok], ix[ok]]
    elif interpolation == "bilinear":
        fx, fy = sx - 0.5, sy - 0.5
        x0, y0 = np.floor(fx).astype(np.int64), np.floor(fy).astype(np.int64)
        ok = (fx >= -0.5) & (fx <= W - 0.5) & (fy >= -0.5) & (fy <= H - 0.5)
        ax, ay = (fx - x0)[..., None], (fy - y0)[..., None]
        x0c, x1c = np.clip(x0, 0, W - 1), np.clip(x0 + 1, 0, W - 1)
        y0c, y1c = np.clip(y0, 0, H - 1), np.clip(y0 + 1, 0, H - 1)
        img = image.astype(np.float64)
        val = (
            img[y0c, x0c] * (1 - ax) * (1 - ay)
            + img[y0c, x1c] * ax * (1 - ay)
            + img[y1c, x0c] * (1 - ax) * ay
            + img[y1c, x1c] * ax * ay
        )
        out[ok] = np.clip(np.rint(val[ok]), 0, 255).astype(np.uint8)
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return out


def box_candidates(before: AbsBox, after: AbsBox, scale: float = 1.0) -> bool:
    """Whether a warped box survives: >2 px per side, >10% of the scaled
    original area, aspect ratio below 20."""
    w, h = after.width, after.height
    if not (w > MIN_BOX_PIXELS and h > MIN_BOX_PIXELS):
        return False
    area_before = before.area * scale * scale
    if not (w * h / (area_before + 1e-16) > MIN_AREA_RATIO):
        return False
    return max(w / (h + 1e-16), h / (w + 1e-16)) < MAX_ASPECT_RATIO


def warp_boxes(boxes: Sequence[AbsBox], M: np.ndarray, size: ImageSize) -> list[AbsBox]:
    """Map each box's four corners, take the axis-aligned hull and clip to the frame."""
    out = []
    for b in boxes:
        corners = np.array(
            [[b.x1, b.y1, 1.0], [b.x2, b.y1, 1.0], [b.x1, b.y2, 1.0], [b.x2, b.y2, 1.0]]
        ) @ M.T
        xs, ys = corners[:, 0], corners[:, 1]
        hull = AbsBox(float(xs.min()), float(ys.min()), float(xs.max()), float(ys.max()))
        out.append(hull.clipped(size.width, size.height))
    return out


def check_affine_bounds(
    params: AffineParams,
    scale_gain: Optional[float] = None,
    translate_frac: Optional[float] = None,
    rotate_deg: Optional[float] = None,
    shear_deg: Optional[float] = None,
):
    eps = 1e-12
    if scale_gain is not None and abs(params.scale - 1.0) > scale_gain + eps:
        raise ValueError(f"scale {params.scale} outside 1 +/- {scale_gain}")
    if translate_frac is not None and max(map(abs, params.translate)) > translate_frac + eps:
        raise ValueError(f"translation {params.translate} outside +/- {translate_frac}")
    if rotate_deg is not None and abs(params.rotate) > rotate_deg + eps:
        raise ValueError(f"rotation {params.rotate} outside +/- {rotate_deg}")
    if shear_deg is not None and max(map(abs, params.shear)) > shear_deg + eps:
        raise ValueError(f"shear {params.shear} outside +/- {shear_deg}")


def affine(
    img: LabeledImage,
    params: AffineParams,
    scale_gain: Optional[float] = None,
    translate_frac: Optional[float] = None,
    rotate_deg: Optional[float] = None,
    shear_deg: Optional[float] = None,
    interpolation: str = "nearest",
) -> LabeledImage:
    """Apply one combined affine warp to raster and labels.

    The optional magnitude arguments are the ``+/-`` bounds the draws in
    ``params`` must respect. Warped boxes failing :func:`box_candidates` are
    dropped.
    """
    check_affine_bounds(params, scale_gain, translate_frac, rotate_deg, shear_deg)
    size = img.size
    M = affine_matrix(params, size)
    raster = warp_raster(img.image, M, interpolation)
    if params.is_identity():
        return LabeledImage(raster, img.labels, img.image_id)
    before = img.abs_boxes()
    after = warp_boxes(before, M, size)
    labels = []
    for lab, b0, b1 in zip(img.labels, before, after):
        if box_candidates(b0, b1, params.scale):
            labels.append(Label(lab.class_id, to_normalized(b1, size)))
    return LabeledImage(raster, tuple(labels), img.image_id)


# --------------------------------------------------------------------------
# Color


def hsv_jitter(
    img: LabeledImage,
    gains: tuple[float, float, float],
    draws: tuple[float, float, float],
) -> LabeledImage:
    """Scale hue, saturation and value by ``1 + r * gain`` per channel.

    Hue wraps around, saturation and value clamp to [0, 1]; the result is
    rounded to the nearest integer level. Labels pass through untouched.
    """
    for g in gains:
        if not 0.0 <= g <= 1.0:
            raise ValueError(f"HSV gains must lie in [0, 1], got {gains}")
    for r in draws:
        if not -1.0 <= r <= 1.0:
            raise ValueError(f"HSV draws must lie in [-1, 1], got {draws}")
    mult = [1.0 + r * g for r, g in zip(draws, gains)]
    if mult == [1.0, 1.0, 1.0]:
        return LabeledImage(img.image.copy(), img.labels, img.image_id)
    hsv = rgb_to_hsv(img.image.astype(np.float64) / 255.0)
    hsv[..., 0] = np.mod(hsv[..., 0] * mult[0], 1.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * mult[1], 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * mult[2], 0.0, 1.0)
    rgb = np.clip(np.rint(hsv_to_rgb(hsv) * 255.0), 0, 255).astype(np.uint8)
    return LabeledImage(rgb, img.labels, img.image_id)


# --------------------------------------------------------------------------
# Mosaic


def mosaic(imgs: Sequence[LabeledImage], center: tuple[int, int], image_id: Optional[str] = None) -> LabeledImage:
    """Tile four s x s images on a 2s x 2s gray canvas around ``center``.

    Images go top-left, top-right, bottom-left, bottom-right, each touching
    the center point and cropped at the canvas edge. Labels move with their
    image, are clipped to the visible part, and vanish if nothing remains.
    """
    if len(imgs) != 4:
        raise SizeMismatch(f"mosaic needs exactly 4 images, got {len(imgs)}")
    s = imgs[0].image.shape[0]
    for im in imgs:
        if im.image.shape[:2] != (s, s):
            raise SizeMismatch(f"mosaic images must all be {s}x{s}, got {im.image.shape[1]}x{im.image.shape[0]}")
    xc, yc = center
    if not (0.5 * s <= xc <= 1.5 * s and 0.5 * s <= yc <= 1.5 * s):
        raise ValueError(f"mosaic center {center} outside [{0.5 * s}, {1.5 * s}]^2")
    xc, yc = int(xc), int(yc)
    canvas = np.full((2 * s, 2 * s, 3), FILL_VALUE, dtype=np.uint8)
    size = ImageSize(2 * s, 2 * s)
    labels = []
    for i, im in enumerate(imgs):
        if i == 0:
            x1a, y1a, x2a, y2a = max(xc - s, 0), max(yc - s, 0), xc, yc
            x1b, y1b = s - (x2a - x1a), s - (y2a - y1a)
        elif i == 1:
            x1a, y1a, x2a, y2a = xc, max(yc - s, 0), min(xc + s, 2 * s), yc
            x1b, y1b = 0, s - (y2a - y1a)
        elif i == 2:
            x1a, y1a, x2a, y2a = max(xc - s, 0), yc, xc, min(2 * s, yc + s)
            x1b, y1b = s - (x2a - x1a), 0
        else:
            x1a, y1a, x2a, y2a = xc, yc, min(xc + s, 2 * s), min(2 * s, yc + s)
            x1b, y1b = 0, 0
        w, h = x2a - x1a, y2a - y1a
        canvas[y1a:y2a, x1a:x2a] = im.image[y1b : y1b + h, x1b : x1b + w]
        dx, dy = x1a - x1b, y1a - y1b
        for lab, box in zip(im.labels, im.abs_boxes()):
            moved = box.translated(dx, dy)
            clipped = AbsBox(
                min(max(moved.x1, x1a), x2a),
                min(max(moved.y1, y1a), y2a),
                min(max(moved.x2, x1a), x2a),
                min(max(moved.y2, y1a), y2a),
            )
            if clipped.width > 0 and clipped.height > 0:
                labels.append(Label(lab.class_id, to_normalized(clipped, size)))
    return LabeledImage(canvas, tuple(labels), imgs[0].image_id if image_id is None else image_id)


# --------------------------------------------------------------------------
# Pipeline

VFLIP, HFLIP, SCALE, TRANSLATE, ROTATE, SHEAR, HSV, MOSAIC = (
    "vflip", "hflip", "scale", "translate", "rotate", "shear", "hsv", "mosaic",
)
KINDS = (VFLIP, HFLIP, SCALE, TRANSLATE, ROTATE, SHEAR, HSV, MOSAIC)
GEOMETRIC = (SCALE, TRANSLATE, ROTATE, SHEAR)


@dataclass(frozen=True)
class AugmentOp:
    """One operator with its firing probability.

    ``magnitude``: scale gain, translate fraction, rotate/shear degrees, a
    ``(h, s, v)`` gain triple for HSV; unused for flips and mosaic.
    """

    kind: str
    probability: float
    magnitude: object = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown augmentation kind {self.kind!r}")
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError(f"probability {self.probability} outside [0, 1]")
        mags = self.magnitude if isinstance(self.magnitude, (tuple, list)) else (self.magnitude,)
        mags = tuple(float(m) for m in mags)
        if not all(math.isfinite(m) and m >= 0.0 for m in mags):
            raise ValueError(f"magnitude {self.magnitude} must be finite and non-negative")
        if self.kind == HSV:
            if len(mags) == 1:
                mags = mags * 3
            if len(mags) != 3:
                raise ValueError("HSV magnitude is an (h, s, v) triple")
            object.__setattr__(self, "magnitude", mags)
        else:
            if len(mags) != 1:
                raise ValueError(f"{self.kind} magnitude must be a single number")
            object.__setattr__(self, "magnitude", mags[0])
        if self.kind in (ROTATE, SHEAR) and self.magnitude > 180.0:
            raise ValueError(f"{self.kind} magnitude must be at most 180 degrees")
        if self.kind == SCALE and self.magnitude >= 1.0:
            raise ValueError("scale gain must be below 1 so the scale factor stays positive")

    def to_dict(self) -> dict:
        mag = list(self.magnitude) if isinstance(self.magnitude, tuple) else self.magnitude
        return {"kind": self.kind, "probability": self.probability, "magnitude": mag}


@dataclass(frozen=True)
class AugmentPipeline:
    ops: tuple[AugmentOp, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {"seed": self.seed, "ops": [op.to_dict() for op in self.ops]}

    @classmethod
    def from_dict(cls, data) -> "AugmentPipeline":
        ops = tuple(AugmentOp(o["kind"], float(o["probability"]), o.get("magnitude", 0.0)) for o in data["ops"])
        return cls(ops, int(data.get("seed", 0)))


def default_pipeline(seed: int = 0, **overrides) -> AugmentPipeline:
    """Default augmentation settings, overridable per kind.

    ``overrides`` maps a kind to ``probability`` (flips, mosaic) or
    ``magnitude`` (the rest).
    """
    probs = {MOSAIC: 1.0, VFLIP: 0.0, HFLIP: 0.5}
    mags = {SCALE: 0.5, TRANSLATE: 0.2, ROTATE: 0.0, SHEAR: 0.0, HSV: (0.015, 0.7, 0.4)}
    for k, v in overrides.items():
        if k in probs:
            probs[k] = v
        elif k in mags:
            mags[k] = v
        else:
            raise ValueError(f"unknown augmentation override {k!r}")
    ops = [
        AugmentOp(MOSAIC, probs[MOSAIC]),
        AugmentOp(ROTATE, 1.0, mags[ROTATE]),
        AugmentOp(TRANSLATE, 1.0, mags[TRANSLATE]),
        AugmentOp(SCALE, 1.0, mags[SCALE]),
        AugmentOp(SHEAR, 1.0, mags[SHEAR]),
        AugmentOp(HSV, 1.0, mags[HSV]),
        AugmentOp(VFLIP, probs[VFLIP]),
        AugmentOp(HFLIP, probs[HFLIP]),
    ]
    return AugmentPipeline(tuple(ops), seed)


def image_rng(seed: int, image_id: str) -> np.random.Generator:
    digest = hashlib.sha256(str(image_id).encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest[:8], "little")]))


def _augment_one(img: LabeledImage, index: int, dataset: Sequence[LabeledImage], pipeline: AugmentPipeline):
    rng = image_rng(pipeline.seed, img.image_id)
    out = img
    pending: Optional[AffineParams] = None

    def flush():
        nonlocal out, pending
        if pending is not None:
            out = affine(out, pending)
            pending = None

    for op in pipeline.ops:
        fires = rng.random() < op.probability
        if not fires:
            continue
        if op.kind in GEOMETRIC:
            p = pending or AffineParams()
            m = op.magnitude
            if op.kind == SCALE:
                p = replace(p, scale=float(rng.uniform(1.0 - m, 1.0 + m)))
            elif op.kind == TRANSLATE:
                p = replace(p, translate=(float(rng.uniform(-m, m)), float(rng.uniform(-m, m))))
            elif op.kind == ROTATE:
                p = replace(p, rotate=float(rng.uniform(-m, m)))
            else:
                p = replace(p, shear=(float(rng.uniform(-m, m)), float(rng.uniform(-m, m))))
            pending = p
            continue
        flush()
        if op.kind == VFLIP:
            out = flip(out, VERTICAL)
        elif op.kind == HFLIP:
            out = flip(out, HORIZONTAL)
        elif op.kind == HSV:
            draws = tuple(float(r) for r in rng.uniform(-1.0, 1.0, 3))
            out = hsv_jitter(out, op.magnitude, draws)
        elif op.kind == MOSAIC:
            others = [j for j in range(len(dataset)) if j != index]
            if not others:
                raise EmptyDataset("mosaic needs partner images but the dataset has only one")
            picks = [dataset[others[int(k)]] for k in rng.integers(0, len(others), 3)]
            s = out.image.shape[0]
            if out.image.shape[0] != out.image.shape[1]:
                raise SizeMismatch("mosaic needs square images")
            lo, hi = int(math.ceil(0.5 * s)), int(math.floor(1.5 * s))
            center = (int(rng.integers(lo, hi + 1)), int(rng.integers(lo, hi + 1)))
            out = mosaic([out] + picks, center, image_id=img.image_id)
    flush()
    return out


def apply_pipeline(dataset: Sequence[LabeledImage], pipeline: AugmentPipeline) -> list[LabeledImage]:
    """Augment every image with its own random stream.

    Each op draws once per image, in op order, to decide whether it fires,
    then samples its magnitudes uniformly within ``+/-`` bounds. Runs of
    consecutive geometric ops are merged into a single warp. Mosaic takes
    three partners (original, unaugmented) from the rest of the dataset.
    """
    dataset = list(dataset)
    ids = [im.image_id for im in dataset]
    if len(set(ids)) != len(ids):
        raise ValueError("image ids must be unique within a dataset")
    return [_augment_one(img, i, dataset, pipeline) for i, img in enumerate(dataset)]


# --------------------------------------------------------------------------
# Disk helpers


def load_labeled_image(image_path, label_path, registry=None, image_id: Optional[str] = None) -> LabeledImage:
    from pathlib import Path

    from PIL import Image

    from .io import ClassRegistry, _norm_box, _parse_lines

    registry = registry or ClassRegistry()
    with Image.open(image_path) as pil:
        raster = np.asarray(pil.convert("RGB"), dtype=np.uint8)
    labels = []
    label_path = Path(label_path)
    text = label_path.read_text() if label_path.exists() else ""
    for lineno, class_id, values in _parse_lines(text, 5, str(label_path)):
        registry.check(class_id)
        labels.append(Label(class_id, _norm_box(values, lineno, str(label_path))))
    return LabeledImage(raster, tuple(labels), Path(image_path).stem if image_id is None else image_id)


def save_labeled_image(img: LabeledImage, image_path, label_path):
    from PIL import Image

    from .io import format_label_line

    Image.fromarray(img.image, "RGB").save(image_path, format="PNG")
    with open(label_path, "w") as fh:
        for lab in img.labels:
            fh.write(format_label_line(lab.class_id, lab.box) + "\n")
