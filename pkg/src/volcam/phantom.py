"""Synthetic CTCA-like volumes with known labels, lesion boxes and masks.

Each volume holds a noisy background, an ellipsoidal blob (aorta/heart
surrogate) and a curved tube running along the slice axis (coronary
surrogate). Abnormal volumes add hyperintense spheres centred on the tube
(calcified-plaque surrogate). Foreground mask = blob | tube | lesions.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data.io import write_png

LABELS = ("normal", "cad")


@dataclass
class PhantomSpec:
    shape: tuple[int, int, int] = (64, 64, 64)
    # per-subject slice count drawn uniformly from this inclusive range; None keeps shape[0]
    slice_range: tuple[int, int] | None = None
    background: float = 30.0
    noise_sigma: float = 10.0
    blob_intensity: float = 110.0
    blob_radii: tuple[float, float] = (0.16, 0.22)  # fraction of in-plane extent
    vessel_intensity: float = 160.0
    vessel_radius: tuple[float, float] = (2.0, 3.0)
    vessel_curvature: float = 0.12  # sinusoid amplitude as a fraction of in-plane extent
    lesion_count: tuple[int, int] = (1, 3)
    lesion_radius: tuple[float, float] = (5.0, 7.0)
    lesion_boost: float = 80.0
    abnormal: bool = False
    seed: int = 0

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        if self.slice_range is not None:
            self.slice_range = tuple(int(s) for s in self.slice_range)
        for name in ("blob_radii", "vessel_radius", "lesion_radius"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
        self.lesion_count = tuple(int(v) for v in self.lesion_count)
        if self.lesion_count[0] < 1 or self.lesion_count[0] > self.lesion_count[1]:
            raise ValueError(f"lesion count range {self.lesion_count} must satisfy 1 <= lo <= hi")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LesionRecord:
    center: tuple[float, float, float]
    radius: float
    bbox: tuple[tuple[int, int], ...]  # inclusive (lo, hi) voxel bounds per axis (z, y, x)

    def to_dict(self) -> dict:
        return {"center": [round(c, 4) for c in self.center], "radius": round(self.radius, 4),
                "bbox": [list(b) for b in self.bbox]}


@dataclass
class Phantom:
    volume: np.ndarray  # uint8 (D, H, W)
    mask: np.ndarray  # uint8 0/1 (D, H, W)
    label: str
    lesions: list[LesionRecord] = field(default_factory=list)
    lesion_mask: np.ndarray | None = None
    vessel_mask: np.ndarray | None = None


def _centerline(depth, h, w, amp, rng):
    z = np.arange(depth, dtype=np.float64)
    cy0, cx0 = 0.66 * h, 0.64 * w
    fy, fx = rng.uniform(0.6, 1.4, size=2)
    py, px = rng.uniform(0, 2 * np.pi, size=2)
    ay, ax = amp * h * rng.uniform(0.6, 1.0), amp * w * rng.uniform(0.6, 1.0)
    cy = cy0 + ay * np.sin(2 * np.pi * fy * z / depth + py)
    cx = cx0 + ax * np.sin(2 * np.pi * fx * z / depth + px)
    return cy, cx


def gen_phantom_volume(spec: PhantomSpec, rng: np.random.Generator | None = None) -> Phantom:
    """Deterministic phantom from ``spec.seed`` (or from ``rng`` when given)."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    depth, h, w = spec.shape
    if spec.slice_range is not None:
        lo, hi = spec.slice_range
        depth = int(rng.integers(lo, hi + 1))
    rmax = spec.vessel_radius[1]
    amp = spec.vessel_curvature
    # tube must stay inside the slice: centre band is 0.64-0.66 of the extent
    if 0.66 * h + amp * h + rmax >= h - 1 or 0.64 * w + amp * w + rmax >= w - 1 or min(h, w) < 16:
        raise ValueError(f"vessel tube (curvature {amp}, radius {rmax}) does not fit a {h}x{w} slice")
    if spec.abnormal and 2 * spec.lesion_radius[1] + 2 >= min(depth, h, w):
        raise ValueError(f"lesion radius {spec.lesion_radius[1]} does not fit volume {depth}x{h}x{w}")

    zz, yy, xx = np.meshgrid(np.arange(depth), np.arange(h), np.arange(w), indexing="ij")

    # blob: ellipsoid in the upper-left quadrant, spanning the middle of the slice axis
    ry, rx = (rng.uniform(*spec.blob_radii) * h, rng.uniform(*spec.blob_radii) * w)
    rz = rng.uniform(0.3, 0.4) * depth
    bc = (depth * rng.uniform(0.45, 0.55), h * rng.uniform(0.3, 0.36), w * rng.uniform(0.3, 0.36))
    blob = ((zz - bc[0]) / rz) ** 2 + ((yy - bc[1]) / ry) ** 2 + ((xx - bc[2]) / rx) ** 2 <= 1.0

    # tube along the slice axis
    cy, cx = _centerline(depth, h, w, amp, rng)
    radius = rng.uniform(*spec.vessel_radius)
    tube = (yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2 <= radius**2

    lesions: list[LesionRecord] = []
    lesion = np.zeros_like(tube)
    if spec.abnormal:
        count = int(rng.integers(spec.lesion_count[0], spec.lesion_count[1] + 1))
        for _ in range(count):
            r = rng.uniform(*spec.lesion_radius)
            margin = int(np.ceil(r)) + 1
            z0 = float(rng.integers(margin, depth - margin))
            c = (z0, float(cy[int(z0)]), float(cx[int(z0)]))
            sphere = (zz - c[0]) ** 2 + (yy - c[1]) ** 2 + (xx - c[2]) ** 2 <= r**2
            idx = np.argwhere(sphere)
            bbox = tuple((int(idx[:, a].min()), int(idx[:, a].max())) for a in range(3))
            lesions.append(LesionRecord(c, r, bbox))
            lesion |= sphere

    vol = np.full((depth, h, w), spec.background, dtype=np.float64)
    vol[blob] = spec.blob_intensity
    vol[tube] = spec.vessel_intensity
    vol[lesion] = spec.vessel_intensity + spec.lesion_boost
    vol += rng.normal(0.0, spec.noise_sigma, size=vol.shape)
    volume = np.clip(np.floor(vol + 0.5), 0, 255).astype(np.uint8)
    mask = (blob | tube | lesion).astype(np.uint8)
    label = "cad" if spec.abnormal else "normal"
    return Phantom(volume, mask, label, lesions, lesion.astype(np.uint8), tube.astype(np.uint8))


def subject_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream per subject so generation order does not matter."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def gen_phantom_dataset(
    n_normal: int,
    n_abnormal: int,
    template: PhantomSpec | None,
    seed: int,
    out_dir,
) -> list[dict]:
    """Write a phantom dataset in the standard on-disk layout.

    ``subjects/<id>/slice_####.png``, ``labels.csv``, ``ground_truth/<id>.json``
    and ``masks/<id>/slice_####.png`` (0/255). Returns the ground-truth records.
    """
    if n_normal < 1 or n_abnormal < 1:
        raise ValueError("need at least one subject per class")
    template = template or PhantomSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    order = np.random.default_rng(seed).permutation(np.array([0] * n_normal + [1] * n_abnormal))
    width = max(4, len(str(len(order))))
    records = []
    rows = []
    for i, is_cad in enumerate(order, start=1):
        sid = f"subj{i:0{width}d}"
        spec = replace(template, abnormal=bool(is_cad), seed=seed)
        ph = gen_phantom_volume(spec, subject_rng(seed, i))
        sdir = out / "subjects" / sid
        mdir = out / "masks" / sid
        sdir.mkdir(parents=True, exist_ok=True)
        mdir.mkdir(parents=True, exist_ok=True)
        for z in range(ph.volume.shape[0]):
            write_png(sdir / f"slice_{z:04d}.png", ph.volume[z])
            write_png(mdir / f"slice_{z:04d}.png", ph.mask[z] * 255)
        rec = {
            "subject_id": sid,
            "label": ph.label,
            "shape": list(ph.volume.shape),
            "lesions": [l.to_dict() for l in ph.lesions],
            "lesion_slices": sorted({int(z) for z in np.nonzero(ph.lesion_mask.any(axis=(1, 2)))[0]}),
        }
        gt = out / "ground_truth"
        gt.mkdir(exist_ok=True)
        (gt / f"{sid}.json").write_text(json.dumps(rec, sort_keys=True, indent=1) + "\n")
        records.append(rec)
        rows.append((sid, ph.label))
    with open(out / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["subject_id", "label"])
        writer.writerows(rows)
    (out / "phantom_spec.json").write_text(
        json.dumps({"template": template.to_dict(), "seed": seed, "n_normal": n_normal, "n_abnormal": n_abnormal},
                   sort_keys=True, indent=1) + "\n"
    )
    return records


def top_percentile_feature(volume: np.ndarray, fraction: float = 0.001) -> float:
    """Mean intensity of the brightest ``fraction`` of voxels."""
    flat = np.sort(volume.reshape(-1).astype(np.float64))
    k = max(1, int(round(fraction * flat.size)))
    return float(flat[-k:].mean())
