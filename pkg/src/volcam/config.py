"""Strict YAML run configuration.

Every key has a documented default (``DEFAULTS``). Unknown keys, wrong types
and out-of-range values are rejected with the dotted key path. The effective
config (defaults merged with the file) is written back out deterministically.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import yaml

from .models.resnet import ResnetConfig
from .models.unet import UnetConfig
from .phantom import PhantomSpec
from .training.schedule import TrainConfig

SCHEMA_VERSION = 1
MODEL_KINDS = ("resnet2d", "resnet3d", "unet2d")

DEFAULTS: dict = {
    "version": SCHEMA_VERSION,
    "seed": 0,
    "threads": None,
    "output_dir": "runs/default",
    "data": {
        "root": "data/phantoms",
        "preprocessed": None,  # None -> <root>-preprocessed
        "size": None,  # [h, w] in-plane resize; None keeps the input size
        "n_slices": None,  # slice-axis resample target; None keeps the input count
        "manifest": None,  # None -> <output_dir>/manifest.json
        "splits": {
            "train": {"normal": 30, "cad": 30},
            "val": {"normal": 7, "cad": 7},
            "test": {"normal": 7, "cad": 7},
        },
        "slice_stride": 1,  # 2D models: use every k-th slice
    },
    "phantom": {
        "n_normal": 44,
        "n_abnormal": 44,
        "shape": [64, 64, 64],
        "slice_range": None,
        "background": 30.0,
        "noise_sigma": 10.0,
        "blob_intensity": 110.0,
        "blob_radii": [0.16, 0.22],
        "vessel_intensity": 160.0,
        "vessel_radius": [2.0, 3.0],
        "vessel_curvature": 0.12,
        "lesion_count": [1, 3],
        "lesion_radius": [5.0, 7.0],
        "lesion_boost": 80.0,
    },
    "model": {
        "kind": "resnet3d",
        "resnet": {
            "blocks": [3, 4, 6, 3],
            "base_width": 64,
            "width_multiplier": "1/4",
            "stem_pool": True,
            "stage_strides": [1, 2, 1, 1],
            "stem_alignment": "symmetric",
            "expansion": 4,
        },
        "unet": {"depth": 4, "base_channels": 16},
    },
    "train": {
        "lr": 1e-3,
        "plateau_factor": 0.1,
        "plateau_patience": 3,
        "early_stop_patience": 10,
        "min_delta": 1e-4,
        "monitor": "val_loss",
        "batch_size": 4,
        "max_epochs": 15,
    },
    "evaluate": {"split": "test", "threshold": 0.5},
    "explain": {
        "split": "test",
        "subjects": None,  # None -> every subject of the split
        "target": "cad",
        "probes": "all",  # all | first | middle | last
        "slice_index": None,  # 3D: None -> slice of the last-layer CAM peak
        "alpha": 0.5,
        "normalization": "max",
    },
    "segment": {
        "split": "test",
        "target_class": 1,
        "probe": "bottleneck",
        "dilation": 4,  # pixels; ground-truth dilation for the CAM mass check
        "overlays": 4,  # number of test slices rendered
    },
}

# types accepted where the default is None
NULLABLE = {
    "threads": int,
    "data.preprocessed": str,
    "data.size": list,
    "data.n_slices": int,
    "data.manifest": str,
    "phantom.slice_range": list,
    "explain.subjects": list,
    "explain.slice_index": int,
}
ALTERNATIVES = {"model.resnet.width_multiplier": (str, int, float)}


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


def _type_ok(value, expected) -> bool:
    if isinstance(expected, tuple):
        return any(_type_ok(value, e) for e in expected)
    if expected is bool:
        return isinstance(value, bool)
    if isinstance(value, bool):
        return False
    if expected is float:
        return isinstance(value, (int, float))
    return isinstance(value, expected)


def _merge(defaults: dict, given, path: str) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping, got {type(given).__name__}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        kp = f"{path}.{key}" if path else str(key)
        if key not in defaults:
            raise ConfigError(f"{kp}: unknown key")
        default = defaults[key]
        if isinstance(default, dict) and kp != "data.splits":
            out[key] = _merge(default, {} if value is None else value, kp)
            continue
        if value is None:
            if default is not None:
                raise ConfigError(f"{kp}: must not be null")
            out[key] = None
            continue
        expected = ALTERNATIVES.get(kp) or NULLABLE.get(kp) or (dict if isinstance(default, dict) else type(default))
        if not _type_ok(value, expected):
            raise ConfigError(f"{kp}: expected {getattr(expected, '__name__', expected)}, got {type(value).__name__}")
        out[key] = value
    return out


@dataclass
class RunConfig:
    raw: dict  # effective config
    phantom: PhantomSpec
    resnet: ResnetConfig | None
    unet: UnetConfig | None
    train: TrainConfig

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def model_kind(self) -> str:
        return self.raw["model"]["kind"]

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    def section(self, name: str) -> dict:
        return self.raw[name]

    def dump(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=False)


def _check(cond: bool, path: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{path}: {msg}")


def _build(kp: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{kp}: {exc}") from None


def resolve(raw: dict) -> RunConfig:
    """Validate the merged mapping and build the per-module config objects."""
    _check(raw["version"] == SCHEMA_VERSION, "version", f"unsupported schema version {raw['version']}")
    _check(raw["threads"] is None or raw["threads"] >= 1, "threads", "must be >= 1")
    d = raw["data"]
    if d["size"] is not None:
        _check(len(d["size"]) == 2 and all(isinstance(v, int) and v > 0 for v in d["size"]), "data.size",
               "must be two positive integers")
    _check(d["n_slices"] is None or d["n_slices"] >= 1, "data.n_slices", "must be >= 1")
    _check(d["slice_stride"] >= 1, "data.slice_stride", "must be >= 1")
    for split, counts in d["splits"].items():
        _check(split in ("train", "val", "test"), f"data.splits.{split}", "unknown split")
        _check(isinstance(counts, dict), f"data.splits.{split}", "expected a mapping")
        for label, n in counts.items():
            kp = f"data.splits.{split}.{label}"
            _check(label in ("normal", "cad"), kp, "unknown label")
            _check(_type_ok(n, int) and n >= 0, kp, "must be a nonnegative integer")

    ph = dict(raw["phantom"])
    _check(ph.pop("n_normal") >= 1, "phantom.n_normal", "must be >= 1")
    _check(ph.pop("n_abnormal") >= 1, "phantom.n_abnormal", "must be >= 1")
    phantom = _build("phantom", PhantomSpec, **ph)

    m = raw["model"]
    _check(m["kind"] in MODEL_KINDS, "model.kind", f"must be one of {MODEL_KINDS}, got {m['kind']!r}")
    resnet = unet = None
    spatial = list(phantom.shape) if m["kind"] == "resnet3d" else list(phantom.shape[1:])
    if d["size"] is not None:
        spatial[-2:] = d["size"]
    if d["n_slices"] is not None and m["kind"] == "resnet3d":
        spatial[0] = d["n_slices"]
    if m["kind"].startswith("resnet"):
        r = dict(m["resnet"])
        try:
            r["width_multiplier"] = Fraction(str(r["width_multiplier"]))
        except (ValueError, ZeroDivisionError):
            raise ConfigError(f"model.resnet.width_multiplier: not a number: {r['width_multiplier']!r}") from None
        resnet = _build("model.resnet", ResnetConfig, dim=3 if m["kind"] == "resnet3d" else 2, spatial=spatial, **r)
    else:
        unet = _build("model.unet", UnetConfig, spatial=spatial, **m["unet"])

    t = raw["train"]
    _check(t["batch_size"] >= 1, "train.batch_size", f"must be >= 1, got {t['batch_size']}")
    train = _build("train", TrainConfig, seed=raw["seed"], **t)

    ev, ex, sg = raw["evaluate"], raw["explain"], raw["segment"]
    _check(0.0 <= ev["threshold"] <= 1.0, "evaluate.threshold", "must lie in [0, 1]")
    for kp, v in (("evaluate.split", ev["split"]), ("explain.split", ex["split"]), ("segment.split", sg["split"])):
        _check(v in ("train", "val", "test"), kp, f"unknown split {v!r}")
    _check(ex["target"] in ("cad", "normal"), "explain.target", "must be cad or normal")
    _check(ex["probes"] in ("all", "first", "middle", "last"), "explain.probes", "must be all, first, middle or last")
    _check(0.0 <= ex["alpha"] <= 1.0, "explain.alpha", "must lie in [0, 1]")
    _check(ex["normalization"] in ("max", "none"), "explain.normalization", "must be max or none")
    _check(sg["target_class"] in (0, 1), "segment.target_class", "must be 0 or 1")
    _check(sg["dilation"] >= 0, "segment.dilation", "must be >= 0")
    _check(sg["overlays"] >= 0, "segment.overlays", "must be >= 0")
    return RunConfig(raw, phantom, resnet, unet, train)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (None or an empty file means all defaults) and apply flat ``overrides``."""
    given = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            given = yaml.safe_load(path.read_text()) or {}
        except yaml.MarkedYAMLError as exc:
            mark = exc.problem_mark
            raise ConfigError(f"{path}: syntax error at line {mark.line + 1}: {exc.problem}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raw = _merge(DEFAULTS, given, "")
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value
    return resolve(raw)


def dataclass_defaults(cls) -> dict:
    return {f.name: f.default for f in fields(cls)}
