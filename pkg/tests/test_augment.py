import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defectkit.augment import (
    FILL_VALUE,
    AffineParams,
    AugmentOp,
    AugmentPipeline,
    Label,
    LabeledImage,
    affine,
    affine_matrix,
    apply_pipeline,
    box_candidates,
    default_pipeline,
    flip,
    hsv_jitter,
    load_labeled_image,
    mosaic,
    save_labeled_image,
    warp_boxes,
    warp_raster,
)
from defectkit.errors import DegenerateTransform, EmptyDataset, SizeMismatch
from defectkit.geometry import AbsBox, ImageSize, NormBox, to_normalized


def _image(rng, s=32, n=3, image_id="img"):
    raster = rng.integers(0, 256, (s, s, 3), dtype=np.uint8)
    labels = []
    for _ in range(n):
        w, h = rng.uniform(0.1, 0.4, 2)
        labels.append(Label(int(rng.integers(0, 5)), NormBox(rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h)))
    return LabeledImage(raster, tuple(labels), image_id)


def _valid(img):
    for lab in img.labels:
        b = lab.box
        assert 0 <= b.cx <= 1 and 0 <= b.cy <= 1
        assert 0 < b.w <= 1 and 0 < b.h <= 1
        assert b.cx - b.w / 2 >= -1e-9 and b.cx + b.w / 2 <= 1 + 1e-9
        assert b.cy - b.h / 2 >= -1e-9 and b.cy + b.h / 2 <= 1 + 1e-9
        assert 0 <= lab.class_id < 5


def test_flip_examples():
    img = LabeledImage(np.zeros((4, 4, 3), np.uint8), (Label(1, NormBox(0.25, 0.3, 0.1, 0.2)),))
    v = flip(img, "vertical")
    assert v.labels[0].box.cy == pytest.approx(0.7) and v.labels[0].box.cx == 0.25
    h = flip(img, "horizontal")
    assert h.labels[0].box.cx == pytest.approx(0.75) and h.labels[0].box.cy == pytest.approx(0.3)


def test_flip_raster():
    raster = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    img = LabeledImage(raster, ())
    assert np.array_equal(flip(img, "vertical").image, raster[::-1])
    assert np.array_equal(flip(img, "horizontal").image, raster[:, ::-1])
    with pytest.raises(ValueError):
        flip(img, "diagonal")


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["vertical", "horizontal"]))
def test_flip_involution(seed, axis):
    img = _image(np.random.default_rng(seed), s=8, n=4)
    assert flip(flip(img, axis), axis).same_as(img)


def test_identity_affine(rng):
    img = _image(rng)
    out = affine(img, AffineParams())
    assert out.same_as(img)
    assert np.array_equal(affine_matrix(AffineParams(), img.size), np.eye(3))


def test_rotate_180_fixture():
    M = affine_matrix(AffineParams(rotate=180.0), ImageSize(100, 100))
    assert warp_boxes([AbsBox(10, 20, 30, 40)], M, ImageSize(100, 100)) == [AbsBox(70, 60, 90, 80)]


def test_center_scale_fixture():
    M = affine_matrix(AffineParams(scale=0.5), ImageSize(100, 100))
    assert warp_boxes([AbsBox(40, 40, 60, 60)], M, ImageSize(100, 100)) == [AbsBox(45, 45, 55, 55)]


def test_rotate_180_twice_is_identity(rng):
    img = _image(rng, s=16)
    once = affine(img, AffineParams(rotate=180.0))
    # a half turn of the raster is a flip on both axes
    assert np.array_equal(once.image, img.image[::-1, ::-1])
    back = affine(once, AffineParams(rotate=180.0))
    assert np.array_equal(back.image, img.image)
    for a, b in zip(back.labels, img.labels):
        assert a.class_id == b.class_id
        assert a.box.cx == pytest.approx(b.box.cx, abs=1e-12)
        assert a.box.w == pytest.approx(b.box.w, abs=1e-12)


def test_translate_raster_fills_gray():
    raster = np.full((10, 10, 3), 7, np.uint8)
    out = affine(LabeledImage(raster, ()), AffineParams(translate=(0.3, 0.0)))
    assert (out.image[:, :3] == FILL_VALUE).all()
    assert (out.image[:, 3:] == 7).all()


def test_translate_drops_box_leaving_frame():
    img = LabeledImage(np.zeros((100, 100, 3), np.uint8), (Label(0, to_normalized(AbsBox(80, 10, 95, 30), ImageSize(100, 100))),))
    assert affine(img, AffineParams(translate=(0.3, 0.0))).labels == ()
    kept = affine(img, AffineParams(translate=(0.1, 0.0)))
    assert len(kept.labels) == 1


def test_degenerate():
    with pytest.raises(DegenerateTransform):
        warp_raster(np.zeros((4, 4, 3), np.uint8), np.diag([1e-5, 1e-5, 1.0]))
    with pytest.raises(DegenerateTransform):
        affine(LabeledImage(np.zeros((4, 4, 3), np.uint8), ()), AffineParams(shear=(45.0, 45.0)))


def test_bounds_checked(rng):
    img = _image(rng)
    with pytest.raises(ValueError):
        affine(img, AffineParams(rotate=30.0), rotate_deg=10.0)
    affine(img, AffineParams(rotate=10.0), rotate_deg=10.0)


def test_box_candidates():
    b = AbsBox(0, 0, 10, 10)
    assert box_candidates(b, b)
    assert not box_candidates(b, AbsBox(0, 0, 2, 10))
    assert not box_candidates(b, AbsBox(0, 0, 3, 3))
    assert box_candidates(b, AbsBox(0, 0, 5, 5), scale=0.5)
    assert not box_candidates(AbsBox(0, 0, 100, 100), AbsBox(0, 0, 3, 70))


def test_bilinear_identity_on_constant():
    raster = np.full((8, 8, 3), 200, np.uint8)
    M = affine_matrix(AffineParams(rotate=30.0), ImageSize(8, 8))
    out = warp_raster(raster, M, "bilinear")
    assert set(np.unique(out)) <= {200, FILL_VALUE}


def test_hsv_zero_gain_is_identity(rng):
    img = _image(rng)
    out = hsv_jitter(img, (0.0, 0.0, 0.0), (0.3, -0.7, 1.0))
    assert out.same_as(img)


def test_hsv_value_clamps_and_keeps_labels(rng):
    img = _image(rng)
    out = hsv_jitter(img, (0.0, 0.0, 1.0), (0.0, 0.0, 1.0))
    assert out.labels == img.labels
    assert (out.image.max(axis=2) >= img.image.max(axis=2)).all()
    white = LabeledImage(np.full((2, 2, 3), 255, np.uint8), ())
    assert (hsv_jitter(white, (0.0, 0.0, 1.0), (0.0, 0.0, 1.0)).image == 255).all()
    dim = LabeledImage(np.full((2, 2, 3), 100, np.uint8), ())
    assert (hsv_jitter(dim, (0.0, 0.0, 1.0), (0.0, 0.0, 1.0)).image == 200).all()


def test_hsv_rejects_bad_gains(rng):
    with pytest.raises(ValueError):
        hsv_jitter(_image(rng), (1.5, 0, 0), (0, 0, 0))


def _square(s, box, k=0, fill=0, image_id="t"):
    return LabeledImage(np.full((s, s, 3), fill, np.uint8), (Label(k, to_normalized(box, ImageSize(s, s))),), image_id)


def test_mosaic_center_placement():
    s = 64
    imgs = [_square(s, AbsBox(10, 10, 20, 20), k, fill=10 * k) for k in range(4)]
    out = mosaic(imgs, (s, s))
    assert out.size == ImageSize(2 * s, 2 * s)
    boxes = {lab.class_id: b for lab, b in zip(out.labels, out.abs_boxes())}
    assert boxes[0] == AbsBox(10, 10, 20, 20)
    assert boxes[1] == AbsBox(s + 10, 10, s + 20, 20)
    assert boxes[2] == AbsBox(10, s + 10, 20, s + 20)
    assert boxes[3] == AbsBox(s + 10, s + 10, s + 20, s + 20)
    assert (out.image[:s, :s] == 0).all() and (out.image[s:, s:] == 30).all()


def test_mosaic_quadruples_and_crops():
    s = 64
    img = _square(s, AbsBox(10, 10, 20, 20))
    assert len(mosaic([img] * 4, (s, s)).labels) == 4
    # at (s/2, s/2) only the bottom-right copy shows its top-left corner
    off = mosaic([img] * 4, (s // 2, s // 2))
    assert off.abs_boxes() == [AbsBox(42, 42, 52, 52)]
    assert (off.image[s // 2 + s :, :] == FILL_VALUE).all()
    _valid(off)


def test_mosaic_size_errors():
    a, b = _square(32, AbsBox(1, 1, 5, 5)), _square(16, AbsBox(1, 1, 5, 5))
    with pytest.raises(SizeMismatch):
        mosaic([a, a, a, b], (32, 32))
    with pytest.raises(SizeMismatch):
        mosaic([a, a, a], (32, 32))
    with pytest.raises(ValueError):
        mosaic([a] * 4, (0, 0))


def _dataset(rng, n=4, s=32):
    return [_image(rng, s=s, image_id=f"im{i}") for i in range(n)]


def test_pipeline_all_off_is_identity(rng):
    data = _dataset(rng)
    ops = [AugmentOp(k, 0.0) for k in ("mosaic", "vflip", "hflip")] + [AugmentOp("rotate", 0.0, 30.0)]
    out = apply_pipeline(data, AugmentPipeline(ops, seed=3))
    assert all(a.same_as(b) for a, b in zip(out, data))
    zero = default_pipeline(0, mosaic=0.0, hflip=0.0, translate=0.0, scale=0.0, hsv=(0.0, 0.0, 0.0))
    assert all(a.same_as(b) for a, b in zip(apply_pipeline(data, zero), data))


def test_pipeline_same_seed_byte_identical(rng):
    data = _dataset(rng)
    p = default_pipeline(11, rotate=10.0, shear=2.0, vflip=0.5)
    a, b = apply_pipeline(data, p), apply_pipeline(data, p)
    assert all(x.same_as(y) for x, y in zip(a, b))
    assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
    c = apply_pipeline(data, default_pipeline(12, rotate=10.0, shear=2.0, vflip=0.5))
    assert not all(x.same_as(y) for x, y in zip(a, c))


def test_pipeline_vflip_certain(rng):
    data = _dataset(rng)
    out = apply_pipeline(data, AugmentPipeline((AugmentOp("vflip", 1.0),), 0))
    assert all(o.same_as(flip(d, "vertical")) for o, d in zip(out, data))


def test_pipeline_per_image_stream_ignores_order(rng):
    data = _dataset(rng)
    p = default_pipeline(5, mosaic=0.0, rotate=15.0)
    fwd = apply_pipeline(data, p)
    rev = apply_pipeline(data[::-1], p)[::-1]
    assert all(a.same_as(b) for a, b in zip(fwd, rev))


def test_pipeline_single_image_mosaic(rng):
    with pytest.raises(EmptyDataset):
        apply_pipeline(_dataset(rng, 1), default_pipeline(0))
    apply_pipeline(_dataset(rng, 1), default_pipeline(0, mosaic=0.0))


def test_pipeline_outputs_valid(rng):
    data = _dataset(rng, 5)
    for seed in range(6):
        out = apply_pipeline(data, default_pipeline(seed, rotate=20.0, shear=5.0, vflip=0.5))
        for img in out:
            _valid(img)
            assert img.image.dtype == np.uint8


def test_pipeline_roundtrip_dict():
    p = default_pipeline(9, rotate=3.0)
    assert AugmentPipeline.from_dict(p.to_dict()) == p
    with pytest.raises(ValueError):
        AugmentOp("blur", 1.0)
    with pytest.raises(ValueError):
        AugmentOp("vflip", 1.5)
    with pytest.raises(ValueError):
        default_pipeline(0, sharpen=1.0)


def test_save_load(tmp_path, rng):
    img = _image(rng, s=16, image_id="x")
    save_labeled_image(img, tmp_path / "x.png", tmp_path / "x.txt")
    back = load_labeled_image(tmp_path / "x.png", tmp_path / "x.txt")
    assert np.array_equal(back.image, img.image)
    assert back.image_id == "x"
    for a, b in zip(back.labels, img.labels):
        assert a.box.cx == pytest.approx(b.box.cx, abs=1e-6)
