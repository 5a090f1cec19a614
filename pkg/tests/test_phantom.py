import hashlib
import json
from dataclasses import replace

import numpy as np
import pytest

from volcam.data.dataset import load_dataset, split_dataset
from volcam.phantom import PhantomSpec, gen_phantom_dataset, gen_phantom_volume, top_percentile_feature

SMALL = PhantomSpec(shape=(32, 32, 32))


def test_same_seed_bit_identical():
    a = gen_phantom_volume(replace(SMALL, abnormal=True, seed=4))
    b = gen_phantom_volume(replace(SMALL, abnormal=True, seed=4))
    c = gen_phantom_volume(replace(SMALL, abnormal=True, seed=5))
    assert a.volume.tobytes() == b.volume.tobytes()
    assert a.volume.tobytes() != c.volume.tobytes()
    assert a.volume.dtype == np.uint8


def test_lesion_contract():
    assert gen_phantom_volume(replace(SMALL, seed=1)).lesions == []
    for seed in range(10):
        ph = gen_phantom_volume(replace(SMALL, abnormal=True, seed=seed))
        assert 1 <= len(ph.lesions) <= 3
        assert not (ph.lesion_mask & ~ph.mask.astype(bool)).any()
        for les in ph.lesions:
            z, y, x = (int(round(c)) for c in les.center)
            assert ph.vessel_mask[z, y, x]  # centred on the tube
            for (lo, hi), n in zip(les.bbox, ph.volume.shape):
                assert 0 <= lo <= hi < n


def test_lesion_brighter_than_vessel_by_boost():
    gaps = []
    for seed in range(20):
        ph = gen_phantom_volume(replace(SMALL, abnormal=True, seed=seed))
        lesion = ph.lesion_mask.astype(bool)
        vessel = ph.vessel_mask.astype(bool) & ~lesion
        gaps.append(ph.volume[lesion].mean() - ph.volume[vessel].mean())
    # clipping at 255 trims the top of the lesion noise, so allow 2% below the nominal boost
    assert np.mean(gaps) >= 0.98 * SMALL.lesion_boost
    assert min(gaps) > 0.9 * SMALL.lesion_boost


def test_infeasible_geometry_rejected():
    with pytest.raises(ValueError, match="does not fit"):
        gen_phantom_volume(PhantomSpec(shape=(32, 32, 32), vessel_curvature=0.4))
    with pytest.raises(ValueError, match="lesion radius"):
        gen_phantom_volume(PhantomSpec(shape=(12, 32, 32), abnormal=True))
    with pytest.raises(ValueError):
        PhantomSpec(lesion_count=(0, 2))


def test_top_percentile_feature_separates_classes():
    rng = np.random.default_rng(0)
    feats, labels = [], []
    for i in range(88):
        ab = i % 2 == 1
        ph = gen_phantom_volume(replace(PhantomSpec(), abnormal=ab), rng=np.random.default_rng(rng.integers(2**32)))
        feats.append(top_percentile_feature(ph.volume))
        labels.append(int(ab))
    f, y = np.array(feats), np.array(labels)
    best = max(((f >= t).astype(int) == y).mean() for t in np.unique(f))
    assert best >= 0.95


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_layout_and_determinism(tmp_path):
    spec = PhantomSpec(shape=(20, 32, 32), slice_range=(18, 24), lesion_radius=(3.0, 4.0))
    recs = gen_phantom_dataset(3, 2, spec, seed=7, out_dir=tmp_path / "a")
    gen_phantom_dataset(3, 2, spec, seed=7, out_dir=tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    m = load_dataset(tmp_path / "a")
    assert sorted(s.label for s in m.subjects) == ["cad", "cad", "normal", "normal", "normal"]
    assert len({s.slice_count for s in m.subjects}) > 1
    assert all(18 <= s.slice_count <= 24 for s in m.subjects)
    for r in recs:
        gt = json.loads((tmp_path / "a" / "ground_truth" / f"{r['subject_id']}.json").read_text())
        assert gt["label"] == r["label"]
        assert (len(gt["lesions"]) > 0) == (r["label"] == "cad")
        assert len(list((tmp_path / "a" / "masks" / r["subject_id"]).glob("slice_*.png"))) == gt["shape"][0]


def test_table1_scale_split(tmp_path):
    gen_phantom_dataset(44, 44, PhantomSpec(shape=(8, 24, 24), lesion_radius=(1.0, 2.0)), seed=0, out_dir=tmp_path)
    counts = {"train": {"normal": 30, "cad": 30}, "val": {"normal": 7, "cad": 7}, "test": {"normal": 7, "cad": 7}}
    assert split_dataset(load_dataset(tmp_path), counts, seed=0).class_counts() == counts
