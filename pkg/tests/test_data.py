import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from mmsrdet.data import (VEDAI_CLASS_MAP, AugmentationConfig, BoundingBoxLabel, ConversionStats, ImagePair,
                          LabelParseError, VedaiRecord, apply_augmentations, bilinear_downsample,
                          convert_vedai_record, convert_vedai_records, flip_lr, generate_synthetic_dataset,
                          labels_to_array, load_dataset, make_lr_pair, normalize, parse_label_file,
                          parse_vedai_line, read_image, read_manifest, serialize_labels)
from oracles import bilinear_downsample_oracle


# --- normalize ---------------------------------------------------------------


def test_normalize_fixed_points():
    assert np.all(normalize(np.zeros((4, 4), np.uint8)) == 0.0)
    assert np.all(normalize(np.full((4, 4), 255, np.uint8)) == 1.0)
    assert normalize(np.array([[128]], np.uint8))[0, 0] == pytest.approx(0.50196, abs=1e-5)


def test_normalize_16bit_and_range_check():
    assert normalize(np.array([65535]), 16)[0] == 1.0
    with pytest.raises(ValueError):
        normalize(np.array([256]), 8)


# --- bilinear_downsample -----------------------------------------------------


def test_downsample_identity_and_constant():
    x = np.random.default_rng(0).random((3, 8, 8))
    assert np.array_equal(bilinear_downsample(x, 1), x)
    c = np.full((1, 2, 2), 0.37)
    assert bilinear_downsample(c, 2).shape == (1, 1, 1)
    assert bilinear_downsample(c, 2)[0, 0, 0] == pytest.approx(0.37, abs=1e-12)


def test_downsample_ramp_matches_oracle():
    ramp = np.arange(16, dtype=np.float64).reshape(1, 4, 4) / 15
    got = bilinear_downsample(ramp, 2)
    assert got.shape == (1, 2, 2)
    assert np.abs(got - bilinear_downsample_oracle(ramp, 2)).max() < 1e-6


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 3), hq=st.integers(1, 6), wq=st.integers(1, 6), n=st.integers(1, 4),
       seed=st.integers(0, 2**31 - 1))
def test_downsample_matches_oracle_property(c, hq, wq, n, seed):
    x = np.random.default_rng(seed).random((c, hq * n, wq * n))
    assert np.abs(bilinear_downsample(x, n) - bilinear_downsample_oracle(x, n)).max() < 1e-6


@settings(max_examples=25, deadline=None)
@given(v=st.floats(0, 1), n=st.sampled_from([1, 2, 4]), k=st.integers(1, 4))
def test_downsample_constant_property(v, n, k):
    x = np.full((2, 4 * k, 4 * k), v)
    assert np.allclose(bilinear_downsample(x, n), v, atol=1e-12)


def test_downsample_torch_and_errors():
    t = torch.rand(2, 3, 8, 8)
    out = bilinear_downsample(t, 2)
    assert isinstance(out, torch.Tensor) and out.shape == (2, 3, 4, 4)
    with pytest.raises(ValueError):
        bilinear_downsample(np.zeros((1, 5, 4)), 2)
    with pytest.raises(ValueError):
        bilinear_downsample(np.zeros((1, 4, 4)), 0)


def test_make_lr_pair_shapes():
    pair = ImagePair(np.zeros((3, 64, 64)), np.zeros((1, 64, 64)))
    lr = make_lr_pair(pair, 2)
    assert lr.rgb_lr.shape == (3, 32, 32) and lr.ir_lr.shape == (1, 32, 32)


def test_image_pair_validation():
    ImagePair(np.zeros((3, 64, 64)), np.zeros((1, 64, 64))).validate()
    with pytest.raises(ValueError, match="differ"):
        ImagePair(np.zeros((3, 64, 64)), np.zeros((1, 32, 64))).validate()
    with pytest.raises(ValueError, match="divisible"):
        ImagePair(np.zeros((3, 48, 48)), np.zeros((1, 48, 48))).validate()
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        ImagePair(np.full((3, 64, 64), 2.0), np.zeros((1, 64, 64))).validate()


# --- labels ------------------------------------------------------------------


def test_parse_label_examples():
    assert parse_label_file("") == []
    assert parse_label_file("0 0.5 0.5 0.1 0.2") == [BoundingBoxLabel(0, 0.5, 0.5, 0.1, 0.2)]
    two = parse_label_file("3 0.25 0.75 0.05 0.05\n7 0.5 0.5 1.0 1.0")
    assert [b.class_id for b in two] == [3, 7]
    assert parse_label_file(serialize_labels(two)) == two


def test_parse_label_errors_name_the_line():
    with pytest.raises(LabelParseError, match="line 2"):
        parse_label_file("0 0.5 0.5 0.1 0.1\n1 0.5 0.5 0.1")
    with pytest.raises(LabelParseError, match="line 1"):
        parse_label_file("0 1.5 0.5 0.1 0.1")
    with pytest.raises(LabelParseError, match="class"):
        parse_label_file("4 0.5 0.5 0.1 0.1", n_classes=3)


label_st = st.builds(
    BoundingBoxLabel,
    st.integers(0, 20),
    st.floats(0, 1),
    st.floats(0, 1),
    st.floats(1e-4, 1),
    st.floats(1e-4, 1),
)


@settings(max_examples=60, deadline=None)
@given(st.lists(label_st, max_size=12))
def test_label_round_trip_property(labels):
    back = parse_label_file(serialize_labels(labels))
    assert [b.class_id for b in back] == [b.class_id for b in labels]
    assert np.allclose(labels_to_array(back), labels_to_array(labels), atol=1e-8)
    # a second round trip is exact
    assert parse_label_file(serialize_labels(back)) == back


# --- VEDAI -------------------------------------------------------------------


def _rec(corners, cls=1):
    xs, ys = zip(*corners)
    return VedaiRecord(sum(xs) / 4, sum(ys) / 4, 0.0, list(corners), cls)


def test_convert_vedai_examples():
    m = {1: 0}
    b = convert_vedai_record(_rec([(10, 10), (30, 10), (30, 20), (10, 20)]), m, 100, 100)
    assert (b.class_id, b.cx, b.cy, b.w, b.h) == pytest.approx((0, 0.2, 0.15, 0.2, 0.1))
    assert convert_vedai_record(_rec([(10, 10), (30, 10), (30, 20), (10, 20)], cls=99), m, 100, 100) is None
    b = convert_vedai_record(_rec([(0, 0), (50, 0), (50, 50), (0, 50)]), m, 100, 100)
    assert (b.cx, b.cy, b.w, b.h) == pytest.approx((0.25, 0.25, 0.5, 0.5))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(-20, 120), st.floats(-20, 120)), min_size=4, max_size=4))
def test_converted_box_contains_corners(corners):
    b = convert_vedai_record(_rec(corners), {1: 0}, 100, 100)
    if b is None:  # degenerate after clipping
        return
    for x, y in corners:
        x, y = min(max(x / 100, 0), 1), min(max(y / 100, 0), 1)
        assert b.cx - b.w / 2 - 1e-9 <= x <= b.cx + b.w / 2 + 1e-9
        assert b.cy - b.h / 2 - 1e-9 <= y <= b.cy + b.h / 2 + 1e-9


def test_parse_vedai_line_and_batch_conversion():
    row = "00000000 580.9 1009.0 -0.48 571 597 591 565 999 1012 1019 1005 1 0 0"
    image_id, rec = parse_vedai_line(row)
    assert image_id == "00000000" and rec.raw_class_id == 1
    assert rec.corners[0] == (571.0, 999.0)
    _, rec14 = parse_vedai_line(row.split(" ", 1)[1])
    assert rec14 == rec
    with pytest.raises(ValueError):
        parse_vedai_line("1 2 3")
    recs = [rec, _rec([(1, 1), (5, 1), (5, 5), (1, 5)], cls=31), _rec([(1, 1), (9, 1), (9, 9), (1, 9)], cls=23)]
    stats = ConversionStats()
    labels, _ = convert_vedai_records(recs, VEDAI_CLASS_MAP, 1024, 1024, stats)
    assert [b.class_id for b in labels] == [0, 6]
    assert stats.kept == 2 and stats.skipped == 1 and stats.skipped_class == {31: 1}


# --- augmentation ------------------------------------------------------------


@pytest.fixture
def pair_and_labels():
    rng = np.random.default_rng(3)
    pair = ImagePair(rng.random((3, 64, 64)), rng.random((1, 64, 64)), "x")
    labels = np.array([[0, 0.3, 0.4, 0.2, 0.1], [2, 0.7, 0.6, 0.1, 0.3]])
    return pair, labels


def test_disabled_augmentation_is_identity(pair_and_labels):
    pair, labels = pair_and_labels
    out, lab = apply_augmentations(pair, labels, AugmentationConfig.disabled(), 0)
    assert out.rgb.tobytes() == pair.rgb.tobytes() and out.ir.tobytes() == pair.ir.tobytes()
    assert lab.tobytes() == labels.tobytes()


def test_flip_only(pair_and_labels):
    pair, labels = pair_and_labels
    cfg = AugmentationConfig(flip_lr_prob=1.0, hsv_gains=(0, 0, 0), translate_frac=0.0,
                             scale_range=(1.0, 1.0), mosaic_prob=0.0)
    out, lab = apply_augmentations(pair, labels, cfg, 5)
    assert np.allclose(lab[:, 1], 1 - labels[:, 1])
    assert np.array_equal(lab[:, [0, 2, 3, 4]], labels[:, [0, 2, 3, 4]])
    assert np.array_equal(out.rgb, pair.rgb[:, :, ::-1]) and np.array_equal(out.ir, pair.ir[:, :, ::-1])


def test_flip_twice_identity(pair_and_labels):
    pair, labels = pair_and_labels
    p2, l2 = flip_lr(*flip_lr(pair, labels))
    assert np.array_equal(p2.rgb, pair.rgb) and np.array_equal(p2.ir, pair.ir)
    assert np.allclose(l2, labels, atol=1e-15)


def test_augmentation_deterministic_and_in_range(pair_and_labels):
    pair, labels = pair_and_labels
    pool = [pair_and_labels] * 3
    cfg = AugmentationConfig()
    a = apply_augmentations(pair, labels, cfg, 11, mosaic_pool=pool)
    b = apply_augmentations(pair, labels, cfg, 11, mosaic_pool=pool)
    assert np.array_equal(a[0].rgb, b[0].rgb) and np.array_equal(a[0].ir, b[0].ir)
    assert np.array_equal(a[1], b[1])
    assert a[0].rgb.shape == pair.rgb.shape and a[0].ir.shape == pair.ir.shape
    assert 0 <= a[0].rgb.min() and a[0].rgb.max() <= 1
    if len(a[1]):
        x1 = a[1][:, 1] - a[1][:, 3] / 2
        x2 = a[1][:, 1] + a[1][:, 3] / 2
        assert x1.min() >= -1e-9 and x2.max() <= 1 + 1e-9


def test_hsv_leaves_ir_untouched(pair_and_labels):
    pair, labels = pair_and_labels
    cfg = AugmentationConfig(flip_lr_prob=0.0, translate_frac=0.0, scale_range=(1.0, 1.0), mosaic_prob=0.0)
    out, lab = apply_augmentations(pair, labels, cfg, 2)
    assert np.array_equal(out.ir, pair.ir)
    assert not np.array_equal(out.rgb, pair.rgb)
    assert np.array_equal(lab, labels)


def test_augmentation_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(flip_lr_prob=1.5).validate()
    with pytest.raises(ValueError):
        AugmentationConfig(scale_range=(1.5, 0.5)).validate()


# --- files -------------------------------------------------------------------


def test_synthetic_dataset_structure(tmp_path):
    root = generate_synthetic_dataset(tmp_path / "d", seed=0, n_images=8, image_size=256, n_classes=3)
    for sub in ("rgb", "ir", "labels"):
        assert len(list((root / sub).iterdir())) == 8
    items, doc = load_dataset(root)
    assert len(items) == 8 and doc["n_classes"] == 3
    for pair, labels in items:
        pair.validate()
        assert len(labels) >= 1 and labels[:, 0].max() < 3


def test_synthetic_dataset_deterministic(tmp_path):
    a = generate_synthetic_dataset(tmp_path / "a", seed=4, n_images=3, image_size=64)
    b = generate_synthetic_dataset(tmp_path / "b", seed=4, n_images=3, image_size=64)
    files = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    for f in files:
        assert (a / f).read_bytes() == (b / f).read_bytes()


def test_synthetic_dataset_empty(tmp_path):
    root = generate_synthetic_dataset(tmp_path / "e", seed=0, n_images=0, image_size=64)
    assert read_manifest(root)["entries"] == []
    with pytest.raises(ValueError):
        generate_synthetic_dataset(tmp_path / "bad", image_size=100)


def test_ir_16bit_read(tmp_path):
    a = np.array([[0, 65535], [32768, 1000]], dtype=np.uint16)
    Image.fromarray(a).save(tmp_path / "ir.png")
    x, depth = read_image(tmp_path / "ir.png", 1)
    assert depth == 16 and x.shape == (1, 2, 2)
    assert np.allclose(x[0], a / 65535.0)


def test_manifest_version_check(tmp_path):
    (tmp_path / "manifest.json").write_text(json.dumps({"format_version": 99, "entries": []}))
    with pytest.raises(ValueError, match="version"):
        read_manifest(tmp_path)
