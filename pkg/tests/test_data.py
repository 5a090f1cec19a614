import csv

import numpy as np
import pytest

from volcam.data.dataset import (DatasetError, load_dataset, make_slice_samples, preprocess_dataset, read_volume,
                                 split_dataset)
from volcam.data.io import read_png, write_png
from volcam.data.loaders import load_slices, load_volumes
from volcam.data.preprocess import (DegenerateInputWarning, histogram_stretch, map_slice_coordinate,
                                    resample_slices, resize_bilinear)

from oracles import interp_1d


def make_dataset(root, subjects, shape=(4, 6), seed=0):
    """subjects: list of (id, label, n_slices)."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "label"])
        for sid, label, n in subjects:
            w.writerow([sid, label])
            d = root / "subjects" / sid
            d.mkdir(parents=True)
            for z in range(n):
                write_png(d / f"slice_{z:04d}.png", rng.integers(0, 256, shape, dtype=np.uint8))
    return root


def test_png_round_trip_bit_exact(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 9), dtype=np.uint8)
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.dtype == np.uint8 and np.array_equal(back, img)


def test_png_rejects_rgb_input(tmp_path):
    write_png(tmp_path / "rgb.png", np.zeros((3, 3, 3), dtype=np.uint8))
    with pytest.raises(ValueError, match="single-channel"):
        read_png(tmp_path / "rgb.png")


def test_png_unreadable_names_path(tmp_path):
    bad = tmp_path / "bad.png"
    bad.write_bytes(b"not a png")
    with pytest.raises(ValueError, match="bad.png"):
        read_png(bad)


def test_stretch_worked_example():
    img = np.array([[100.0, 164.0], [228.0, 130.0]])
    out = histogram_stretch(img)
    assert not out.constant
    assert out.image[0, 1] == 128  # 127.5 rounds half up
    assert out.image.min() == 0 and out.image.max() == 255


def test_stretch_fixed_point_and_constant():
    full = np.arange(256, dtype=np.uint8).reshape(16, 16)
    assert np.array_equal(histogram_stretch(full).image, full)
    with pytest.warns(DegenerateInputWarning):
        res = histogram_stretch(np.full((5, 5), 77.0))
    assert res.constant and not res.image.any()


def test_stretch_rejects_nonfinite():
    with pytest.raises(ValueError):
        histogram_stretch(np.array([[0.0, np.nan]]))


def test_stretch_idempotent_within_one():
    rng = np.random.default_rng(3)
    for _ in range(20):
        img = rng.normal(50, 20, (12, 12))
        once = histogram_stretch(img).image
        twice = histogram_stretch(once).image
        assert np.abs(once.astype(int) - twice.astype(int)).max() <= 1


def test_resize_examples():
    assert resize_bilinear(np.array([[0, 2], [4, 6]], dtype=np.uint8), (1, 1))[0, 0] == 3
    img = np.random.default_rng(1).integers(0, 256, (9, 5), dtype=np.uint8)
    assert np.array_equal(resize_bilinear(img, (9, 5)), img)
    assert resize_bilinear(np.zeros((512, 512), dtype=np.uint8), (128, 128)).shape == (128, 128)
    with pytest.raises(ValueError):
        resize_bilinear(img, (0, 3))


def test_resize_separable_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    img = rng.integers(0, 256, (5, 7)).astype(np.float64)
    out = resize_bilinear(img, (8, 3))
    rows = np.array([interp_1d(r, 3) for r in img])
    want = np.array([interp_1d(c, 8) for c in rows.T]).T
    assert np.array_equal(out, np.clip(np.floor(want + 0.5), 0, 255).astype(np.uint8))


def test_resample_two_slices_to_four():
    vol = np.stack([np.zeros((2, 2)), np.full((2, 2), 255)]).astype(np.uint8)
    out = resample_slices(vol, 4)
    # oracle samples 0, 63.75, 191.25, 255, then round-half-up
    assert [int(v) for v in out[:, 0, 0]] == [0, 64, 191, 255]


def test_resample_counts_identity_and_single_slice():
    vol = np.random.default_rng(4).integers(0, 256, (300, 2, 3), dtype=np.uint8)
    assert resample_slices(vol, 256).shape == (256, 2, 3)
    same = vol[:256]
    assert np.array_equal(resample_slices(same, 256), same)
    with pytest.warns(DegenerateInputWarning):
        rep = resample_slices(vol[:1], 3)
    assert np.array_equal(rep, np.repeat(vol[:1], 3, axis=0))


def test_slice_coordinate_mapping_is_consistent_with_sampling():
    # source slice centre 0.5*n_in maps to the output centre
    assert map_slice_coordinate(149.5, 300, 256) == pytest.approx(127.5)


def test_load_dataset_and_validation(tmp_path):
    root = make_dataset(tmp_path / "ds", [("a", "normal", 3), ("b", "cad", 12)])
    m = load_dataset(root)
    assert [s.subject_id for s in m.subjects] == ["a", "b"]
    names = [p.rsplit("/", 1)[1] for p in m.by_id("b").slices]
    assert names == sorted(names) and names[10] == "slice_0010.png"
    assert read_volume(m.by_id("b")).shape == (12, 4, 6)

    bad = make_dataset(tmp_path / "bad", [("x", "normal", 1)])
    (bad / "labels.csv").write_text("subject_id,label\nx,maybe\n")
    with pytest.raises(DatasetError, match=r"labels.csv:2.*maybe"):
        load_dataset(bad)
    (bad / "labels.csv").write_text("subject_id,label\ny,cad\n")
    with pytest.raises(DatasetError, match="missing subject directory"):
        load_dataset(bad)


def test_unpadded_slice_name_rejected(tmp_path):
    root = make_dataset(tmp_path / "ds", [("a", "normal", 2)])
    (root / "subjects" / "a" / "slice_0001.png").rename(root / "subjects" / "a" / "slice_1.png")
    with pytest.raises(DatasetError, match="slice_1.png"):
        load_dataset(root)


def phantom_like(tmp_path, n=44):
    subs = [(f"n{i:02d}", "normal", 1) for i in range(n)] + [(f"c{i:02d}", "cad", 1) for i in range(n)]
    return load_dataset(make_dataset(tmp_path / "ds", subs, shape=(2, 2)))


TABLE1 = {"train": {"normal": 30, "cad": 30}, "val": {"normal": 7, "cad": 7}, "test": {"normal": 7, "cad": 7}}


def test_split_allocation_and_determinism(tmp_path):
    m = phantom_like(tmp_path)
    a = split_dataset(m, TABLE1, seed=0)
    assert a.class_counts() == TABLE1
    assert set(a.splits) == {s.subject_id for s in m.subjects}
    assert split_dataset(m, TABLE1, seed=0).splits == a.splits
    others = [split_dataset(m, TABLE1, seed=s).splits for s in range(1, 6)]
    assert all(o != a.splits for o in others)
    with pytest.raises(DatasetError, match="infeasible"):
        split_dataset(m, {"train": {"normal": 30, "cad": 30}}, seed=0)


def test_split_manifest_json_round_trip(tmp_path):
    m = split_dataset(phantom_like(tmp_path), TABLE1, seed=3)
    again = type(m).from_json(m.to_json())
    assert again.splits == m.splits and again.seed == 3


def test_slice_samples_inherit_labels(tmp_path):
    root = make_dataset(tmp_path / "ds", [("a", "cad", 10), ("b", "normal", 4), ("c", "normal", 2)])
    m = split_dataset(load_dataset(root),
                      {"train": {"normal": 1, "cad": 1}, "val": {"normal": 1, "cad": 0}, "test": {}}, seed=0)
    train = make_slice_samples(m, "train")
    total = sum(s.slice_count for s in m.split_subjects("train"))
    assert len(train) == total
    cad = [s for s in train if s.subject_id == "a"]
    assert len(cad) == 10 and all(s.label == "cad" and s.target == 1 for s in cad)
    assert make_slice_samples(m, "test") == []


def test_preprocess_and_loaders(tmp_path):
    root = make_dataset(tmp_path / "ds", [("a", "cad", 5), ("b", "normal", 3)], shape=(8, 8))
    out = preprocess_dataset(root, size=(4, 4), n_slices=6)
    assert out.name == "ds-preprocessed"
    m = split_dataset(load_dataset(out), {"train": {"normal": 1, "cad": 1}}, seed=0)
    vols = load_volumes(m, "train")
    assert vols.x.shape == (2, 1, 6, 4, 4)
    slices = load_slices(m, "train", stride=2)
    assert slices.x.shape == (6, 1, 4, 4)
    assert slices.ids[0].endswith("/0000")
    with pytest.raises(DatasetError, match="empty"):
        load_volumes(m, "test")
