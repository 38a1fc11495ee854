import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdet.data import (
    Annotation,
    SyntheticSpec,
    augment,
    crop,
    dataset_fingerprint,
    generate_dataset,
    generate_scenes,
    hflip,
    load_annotations,
    load_dataset,
    normalize,
    read_pnm,
    save_annotations,
    shape_mask,
    tight_box,
    write_pgm,
)
from cdet.errors import ConfigError, DataIOError


def test_generation_deterministic_and_thread_independent():
    spec = SyntheticSpec(seed=5, image_count=12)
    a = generate_scenes(spec, threads=1)
    b = generate_scenes(spec, threads=3)
    for (ia, aa), (ib, ab) in zip(a, b):
        assert np.array_equal(ia, ib)
        assert aa == ab


def test_different_seeds_differ():
    a = generate_scenes(SyntheticSpec(seed=1, image_count=2))
    b = generate_scenes(SyntheticSpec(seed=2, image_count=2))
    assert not np.array_equal(a[0][0], b[0][0])


def test_boxes_inside_image_and_tight():
    spec = SyntheticSpec(seed=3, image_count=40, noise_level=0.0)
    for img, ann in generate_scenes(spec):
        h, w = img.shape
        assert 1 <= len(ann.labels) <= 3
        for b in ann.boxes:
            assert 0 <= b[0] < b[2] <= w and 0 <= b[1] < b[3] <= h


def test_class_balance_over_500_images():
    spec = SyntheticSpec(seed=11, image_count=500)
    counts = Counter(l for _, ann in generate_scenes(spec) for l in ann.labels)
    total = sum(counts.values())
    assert set(counts) == {1, 2, 3}
    for c in (1, 2, 3):
        assert abs(counts[c] / total - 1 / 3) < 0.05


def test_overlap_cap_respected():
    from cdet.geometry import iou_matrix

    for _, ann in generate_scenes(SyntheticSpec(seed=4, image_count=60, objects_per_image=(3, 3))):
        b = np.array(ann.boxes)
        m = iou_matrix(b, b)
        np.fill_diagonal(m, 0)
        assert m.max() <= 0.3


@pytest.mark.parametrize("kind", ["rectangle", "ellipse", "triangle", "diamond", "cross"])
def test_shape_mask_tight_box(kind):
    m = shape_mask(kind, 20.0, 16.0, 20.0, 10.0, 40, 32)
    x1, y1, x2, y2 = tight_box(m)
    if kind in ("rectangle", "cross"):
        assert (x1, y1, x2, y2) == (10.0, 11.0, 30.0, 21.0)
    assert 10 <= x1 and x2 <= 30 and 11 <= y1 and y2 <= 21


def test_spec_validation():
    with pytest.raises(ConfigError):
        SyntheticSpec(classes=("hexagon",))
    with pytest.raises(ConfigError):
        SyntheticSpec(scale_range=(0.5, 1.2))


def test_pgm_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pnm(tmp_path / "a.pgm"), img)


def test_ppm_is_averaged(tmp_path):
    (tmp_path / "c.ppm").write_text("P3\n# comment\n2 1\n255\n0 30 60  255 255 255\n")
    assert read_pnm(tmp_path / "c.ppm").tolist() == [[30, 255]]


def test_bad_image_raises(tmp_path):
    (tmp_path / "x.pgm").write_text("P5\n1 1\n255\n")
    with pytest.raises(DataIOError):
        read_pnm(tmp_path / "x.pgm")
    (tmp_path / "y.pgm").write_text("P2\n2 2\n255\n1 2 3\n")
    with pytest.raises(DataIOError):
        read_pnm(tmp_path / "y.pgm")


def test_annotation_roundtrip(tmp_path):
    anns = [Annotation(0, 64, 64, [1, 3], [(1.5, 2, 10, 12.25), (0, 0, 4, 4)], [False, True]), Annotation(1, 64, 64)]
    save_annotations(tmp_path / "a.jsonl", anns)
    assert load_annotations(tmp_path / "a.jsonl") == anns


def test_malformed_annotation_line_reports_line(tmp_path):
    good = Annotation(0, 8, 8, [1], [(0, 0, 2, 2)]).to_json()
    (tmp_path / "a.jsonl").write_text(good + "\n" + '{"image_id": 1, "width": 8}\n')
    with pytest.raises(DataIOError, match=r"a\.jsonl:2"):
        load_annotations(tmp_path / "a.jsonl")


def test_generate_dataset_files(tmp_path):
    spec = SyntheticSpec(seed=9, image_count=3, image_size=(64, 64))
    anns = generate_dataset(spec, tmp_path / "d")
    imgs, loaded = load_dataset(tmp_path / "d")
    assert imgs.shape == (3, 64, 64) and loaded == anns
    assert json.loads((tmp_path / "d" / "dataset.json").read_text())["seed"] == 9
    generate_dataset(spec, tmp_path / "e", threads=2)
    assert dataset_fingerprint(tmp_path / "d") == dataset_fingerprint(tmp_path / "e")


def test_normalize_shape_and_range():
    x = normalize(np.array([[[0, 255]]], dtype=np.uint8))
    assert x.shape == (1, 1, 1, 2) and x.dtype == np.float32
    assert x[0, 0, 0].tolist() == pytest.approx([-127.5 / 64, 127.5 / 64])


def test_hflip_involution():
    img, ann = generate_scenes(SyntheticSpec(seed=2, image_count=1))[0]
    fi, fa = hflip(img, ann)
    assert np.array_equal(fi[:, 0], img[:, -1])
    bi, ba = hflip(fi, fa)
    assert np.array_equal(bi, img) and ba == ann


def test_hflip_box_tracks_pixels():
    spec = SyntheticSpec(seed=6, image_count=1, noise_level=0.0, objects_per_image=(1, 1))
    img, ann = generate_scenes(spec)[0]
    fi, fa = hflip(img, ann)
    x1, y1, x2, y2 = (int(v) for v in fa.boxes[0])
    bg = fi[0, 0] if (x1 > 0 or y1 > 0) else fi[-1, -1]
    inside = fi[y1:y2, x1:x2]
    assert np.any(inside != bg)


def test_crop_drops_boxes_whose_center_leaves():
    ann = Annotation(0, 100, 100, [1, 2], [(0, 0, 20, 20), (60, 60, 90, 90)])
    img = np.zeros((100, 100), dtype=np.uint8)
    out = crop(img, ann, (50, 50, 100, 100))
    oi, oa = out
    assert oa.labels == [2]
    assert oa.boxes[0] == pytest.approx((20, 20, 80, 80))
    assert oi.shape == (100, 100)
    assert crop(img, ann, (30, 30, 50, 50)) is None


def test_augment_1000_draws_stay_valid():
    scenes = generate_scenes(SyntheticSpec(seed=8, image_count=10))
    for k in range(1000):
        img, ann = scenes[k % 10]
        ai, aa = augment(img, ann, seed=k)
        assert ai.shape == img.shape and ai.dtype == np.uint8
        assert len(aa.labels) >= 1
        for b in aa.boxes:
            assert 0 <= b[0] < b[2] <= aa.width and 0 <= b[1] < b[3] <= aa.height
            assert b[2] - b[0] >= 1 and b[3] - b[1] >= 1


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_deterministic(seed):
    img, ann = generate_scenes(SyntheticSpec(seed=1, image_count=1))[0]
    a = augment(img, ann, seed)
    b = augment(img, ann, seed)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
