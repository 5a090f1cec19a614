"""Manifest splits to in-memory arrays for training and evaluation."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..training.fit import ArrayDataset
from .dataset import DatasetError, DatasetManifest, read_volume
from .io import read_png


def load_volumes(manifest: DatasetManifest, split: str) -> ArrayDataset:
    """Subject-level samples, x of shape (N, 1, D, H, W); volumes must share one shape."""
    subjects = manifest.split_subjects(split)
    if not subjects:
        raise DatasetError(f"split {split!r} is empty")
    vols = [read_volume(s) for s in subjects]
    shapes = {v.shape for v in vols}
    if len(shapes) != 1:
        raise DatasetError(f"split {split!r} mixes volume shapes {sorted(shapes)}; preprocess with a fixed slice count")
    x = np.stack(vols)[:, None]
    y = np.array([s.target for s in subjects], dtype=np.int64)
    return ArrayDataset(x, y, [s.subject_id for s in subjects])


def load_slices(manifest: DatasetManifest, split: str, stride: int = 1) -> ArrayDataset:
    """Slice-level samples, x of shape (N, 1, H, W); every slice carries its subject's label."""
    xs, ys, ids = [], [], []
    for s in manifest.split_subjects(split):
        for i in range(0, s.slice_count, stride):
            xs.append(read_png(s.slices[i]))
            ys.append(s.target)
            ids.append(f"{s.subject_id}/{i:04d}")
    if not xs:
        raise DatasetError(f"split {split!r} is empty")
    return ArrayDataset(np.stack(xs)[:, None], np.array(ys, dtype=np.int64), ids)


def load_segmentation(manifest: DatasetManifest, split: str, mask_root, stride: int = 1) -> ArrayDataset:
    """Slices with class-index masks read from ``mask_root/masks/<id>/slice_####.png`` (nonzero = foreground)."""
    mask_root = Path(mask_root)
    xs, ms, ids = [], [], []
    for s in manifest.split_subjects(split):
        for i in range(0, s.slice_count, stride):
            name = Path(s.slices[i]).name
            mp = mask_root / "masks" / s.subject_id / name
            if not mp.is_file():
                raise DatasetError(f"mask missing: {mp}")
            img, mask = read_png(s.slices[i]), read_png(mp)
            if img.shape != mask.shape:
                raise DatasetError(f"{mp}: mask shape {mask.shape} differs from slice shape {img.shape}")
            xs.append(img)
            ms.append((mask > 0).astype(np.int64))
            ids.append(f"{s.subject_id}/{i:04d}")
    if not xs:
        raise DatasetError(f"split {split!r} is empty")
    return ArrayDataset(np.stack(xs)[:, None], np.stack(ms), ids)
