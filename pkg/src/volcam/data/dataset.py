"""On-disk dataset layout, manifests, splits and slice-level samples.

Layout::

    root/labels.csv                      header ``subject_id,label``, label in {normal, cad}
    root/subjects/<id>/slice_####.png    8-bit grayscale, zero-padded 4-digit index
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .io import read_png, write_png
from .preprocess import preprocess_volume

LABELS = ("normal", "cad")
SPLITS = ("train", "val", "test")
SLICE_RE = re.compile(r"^slice_(\d{4})\.png$")


class DatasetError(ValueError):
    pass


@dataclass
class SubjectRecord:
    subject_id: str
    label: str
    slices: list[str]

    def __post_init__(self):
        if self.label not in LABELS:
            raise DatasetError(f"subject {self.subject_id}: label {self.label!r} not in {LABELS}")
        if not self.slices:
            raise DatasetError(f"subject {self.subject_id} has no slices")

    @property
    def slice_count(self) -> int:
        return len(self.slices)

    @property
    def target(self) -> int:
        return int(self.label == "cad")


@dataclass
class DatasetManifest:
    subjects: list[SubjectRecord]
    root: str
    splits: dict[str, str] = field(default_factory=dict)
    seed: int | None = None

    def by_id(self, subject_id: str) -> SubjectRecord:
        for s in self.subjects:
            if s.subject_id == subject_id:
                return s
        raise KeyError(subject_id)

    def split_subjects(self, split: str) -> list[SubjectRecord]:
        if split not in SPLITS:
            raise DatasetError(f"unknown split {split!r}")
        return [s for s in self.subjects if self.splits.get(s.subject_id) == split]

    def class_counts(self) -> dict[str, dict[str, int]]:
        out = {sp: {lab: 0 for lab in LABELS} for sp in SPLITS}
        for s in self.subjects:
            sp = self.splits.get(s.subject_id)
            if sp:
                out[sp][s.label] += 1
        return out

    def to_json(self) -> str:
        doc = {
            "root": self.root,
            "seed": self.seed,
            "subjects": [
                {"subject_id": s.subject_id, "label": s.label, "slice_count": s.slice_count,
                 "split": self.splits.get(s.subject_id)}
                for s in self.subjects
            ],
            "class_counts": self.class_counts() if self.splits else None,
        }
        return json.dumps(doc, sort_keys=True, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str, root=None) -> "DatasetManifest":
        doc = json.loads(text)
        m = load_dataset(root or doc["root"])
        m.seed = doc.get("seed")
        for rec in doc["subjects"]:
            if rec.get("split"):
                m.splits[rec["subject_id"]] = rec["split"]
        return m


def load_dataset(root) -> DatasetManifest:
    root = Path(root)
    labels_path = root / "labels.csv"
    if not labels_path.is_file():
        raise DatasetError(f"labels file missing: {labels_path}")
    subjects = []
    with open(labels_path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["subject_id", "label"]:
            raise DatasetError(f"{labels_path}: header must be 'subject_id,label', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise DatasetError(f"{labels_path}:{lineno}: expected 2 fields, got {row}")
            sid, label = row[0].strip(), row[1].strip()
            if label not in LABELS:
                raise DatasetError(f"{labels_path}:{lineno}: unknown label {label!r} for subject {sid}")
            sdir = root / "subjects" / sid
            if not sdir.is_dir():
                raise DatasetError(f"missing subject directory {sdir}")
            names = []
            for p in sdir.iterdir():
                if p.suffix.lower() != ".png":
                    continue
                if not SLICE_RE.match(p.name):
                    raise DatasetError(f"slice file {p} does not follow slice_####.png naming")
                names.append(p.name)
            if not names:
                raise DatasetError(f"subject directory {sdir} holds no slices")
            names.sort()
            subjects.append(SubjectRecord(sid, label, [str(sdir / n) for n in names]))
    return DatasetManifest(subjects, str(root))


def read_volume(record: SubjectRecord) -> np.ndarray:
    slices = [read_png(p) for p in record.slices]
    shapes = {s.shape for s in slices}
    if len(shapes) != 1:
        raise DatasetError(f"subject {record.subject_id}: slices have differing shapes {sorted(shapes)}")
    return np.stack(slices)


def split_dataset(manifest: DatasetManifest, counts: dict[str, dict[str, int]], seed: int) -> DatasetManifest:
    """Assign subjects to train/val/test.

    ``counts[split][label]`` gives how many subjects of each class go to each
    split. Within each class subjects are shuffled with ``seed`` and then
    assigned contiguously in train, val, test order.
    """
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for label in LABELS:
        members = sorted(s.subject_id for s in manifest.subjects if s.label == label)
        wanted = [int(counts.get(sp, {}).get(label, 0)) for sp in SPLITS]
        if min(wanted) < 0 or sum(wanted) != len(members):
            raise DatasetError(
                f"infeasible split for {label}: requested {dict(zip(SPLITS, wanted))} "
                f"(sum {sum(wanted)}) but {len(members)} subjects are available"
            )
        order = [members[i] for i in rng.permutation(len(members))]
        start = 0
        for sp, k in zip(SPLITS, wanted):
            for sid in order[start : start + k]:
                assignment[sid] = sp
            start += k
    return DatasetManifest(manifest.subjects, manifest.root, assignment, seed)


@dataclass(frozen=True)
class SliceSample:
    subject_id: str
    index: int
    path: str
    label: str

    @property
    def target(self) -> int:
        return int(self.label == "cad")


def make_slice_samples(manifest: DatasetManifest, split: str) -> list[SliceSample]:
    """One sample per slice; every slice inherits its subject's label."""
    out = []
    for s in manifest.split_subjects(split):
        for i, p in enumerate(s.slices):
            out.append(SliceSample(s.subject_id, i, p, s.label))
    return out


def preprocess_dataset(root, out_root=None, size=None, n_slices=None) -> Path:
    """Run the preprocessing chain over a dataset; output mirrors the layout under ``<root>-preprocessed``."""
    root = Path(root)
    out_root = Path(out_root) if out_root else root.with_name(root.name + "-preprocessed")
    manifest = load_dataset(root)
    (out_root / "subjects").mkdir(parents=True, exist_ok=True)
    (out_root / "labels.csv").write_bytes((root / "labels.csv").read_bytes())
    for s in manifest.subjects:
        vol = preprocess_volume(read_volume(s), size, n_slices)
        sdir = out_root / "subjects" / s.subject_id
        sdir.mkdir(parents=True, exist_ok=True)
        for old in sdir.glob("slice_*.png"):
            old.unlink()
        for z, img in enumerate(vol):
            write_png(sdir / f"slice_{z:04d}.png", img)
    return out_root
