"""``volcam <subcommand> --config FILE [--seed N] [--threads N] [--out DIR]``.

Exit status: 0 success, 1 invalid configuration or inputs, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, ops
from .config import ConfigError, RunConfig, parse_config
from .data.dataset import DatasetManifest, load_dataset, preprocess_dataset, read_volume, split_dataset
from .data.io import write_png
from .data.loaders import load_segmentation, load_slices, load_volumes
from .explain.gradcam import argmax_position, dilate_box, inside_box, mass_fraction, seg_grad_cam
from .explain.render import render_overlay, render_triptych
from .metrics import classification_metrics, confusion, dice_coefficient, emit_report, write_predictions_csv
from .models.graph import audit_shapes, predict
from .models.resnet import PROBE_LABELS, build_resnet
from .models.unet import build_unet
from .phantom import gen_phantom_dataset
from .training.fit import TrainingSession, evaluate, fit

log = logging.getLogger("volcam")

SUBCOMMANDS = ("phantom-gen", "preprocess", "split", "train", "evaluate", "explain", "segment", "audit")


# -- provenance ----------------------------------------------------------------
def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def content_hash(path) -> str | None:
    """SHA-256 of a file, or of a directory tree (sorted relative paths + file digests)."""
    path = Path(path)
    if path.is_file():
        return _sha256_file(path)
    if not path.is_dir():
        return None
    h = hashlib.sha256()
    for p in sorted(q for q in path.rglob("*") if q.is_file()):
        h.update(p.relative_to(path).as_posix().encode() + b"\0" + _sha256_file(p).encode() + b"\n")
    return h.hexdigest()


def write_run_info(cfg: RunConfig, subcommand: str, config_path, inputs: dict) -> None:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective_config.yaml").write_text(cfg.dump())
    info = {
        "tool": "volcam",
        "version": __version__,
        "subcommand": subcommand,
        "seed": cfg.seed,
        "threads": cfg.raw["threads"],
        "config_file": str(config_path) if config_path else None,
        "config_sha256": content_hash(config_path) if config_path else None,
        "inputs": {k: {"path": str(v), "sha256": content_hash(v)} for k, v in sorted(inputs.items())},
    }
    (out / f"{subcommand}.run.json").write_text(json.dumps(info, sort_keys=True, indent=2) + "\n")


# -- shared helpers --------------------------------------------------------------
def _paths(cfg: RunConfig) -> dict[str, Path]:
    d = cfg.section("data")
    root = Path(d["root"])
    pre = Path(d["preprocessed"]) if d["preprocessed"] else root.with_name(root.name + "-preprocessed")
    manifest = Path(d["manifest"]) if d["manifest"] else cfg.output_dir / "manifest.json"
    return {"root": root, "preprocessed": pre, "manifest": manifest, "train": cfg.output_dir / "train"}


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _manifest(cfg: RunConfig) -> DatasetManifest:
    p = _paths(cfg)
    text = _require(p["manifest"], "split manifest (run 'split' first)").read_text()
    return DatasetManifest.from_json(text, root=_require(p["preprocessed"], "preprocessed dataset"))


def _split_data(cfg: RunConfig, manifest: DatasetManifest, split: str):
    kind, stride = cfg.model_kind, cfg.section("data")["slice_stride"]
    if kind == "resnet3d":
        return load_volumes(manifest, split)
    if kind == "resnet2d":
        return load_slices(manifest, split, stride)
    return load_segmentation(manifest, split, _paths(cfg)["root"], stride)


def _build_model(cfg: RunConfig, spatial=None):
    if cfg.resnet is not None:
        rc = cfg.resnet if spatial is None else replace(cfg.resnet, spatial=list(spatial))
        return build_resnet(rc, seed=cfg.seed)
    uc = cfg.unet if spatial is None else replace(cfg.unet, spatial=list(spatial))
    return build_unet(uc, seed=cfg.seed)


def _checkpoint(cfg: RunConfig) -> Path:
    tdir = _paths(cfg)["train"]
    for name in ("best.ckpt", "last.ckpt"):
        if (tdir / name).is_file():
            return tdir / name
    raise FileNotFoundError(f"no checkpoint in {tdir} (run 'train' first)")


# -- subcommands ------------------------------------------------------------------
def cmd_phantom_gen(cfg: RunConfig) -> dict:
    ph = cfg.section("phantom")
    root = _paths(cfg)["root"]
    recs = gen_phantom_dataset(ph["n_normal"], ph["n_abnormal"], cfg.phantom, cfg.seed, root)
    print(f"wrote {len(recs)} phantom subjects to {root}")
    return {}


def cmd_preprocess(cfg: RunConfig) -> dict:
    p, d = _paths(cfg), cfg.section("data")
    _require(p["root"], "dataset root")
    size = tuple(d["size"]) if d["size"] else None
    out = preprocess_dataset(p["root"], p["preprocessed"], size, d["n_slices"])
    print(f"preprocessed dataset written to {out}")
    return {"dataset": p["root"]}


def cmd_split(cfg: RunConfig) -> dict:
    p = _paths(cfg)
    manifest = split_dataset(load_dataset(_require(p["preprocessed"], "preprocessed dataset")),
                             cfg.section("data")["splits"], cfg.seed)
    p["manifest"].parent.mkdir(parents=True, exist_ok=True)
    p["manifest"].write_text(manifest.to_json())
    for split, counts in manifest.class_counts().items():
        print(f"{split}: {counts['normal']} normal, {counts['cad']} cad")
    return {"dataset": p["preprocessed"]}


def cmd_train(cfg: RunConfig) -> dict:
    manifest = _manifest(cfg)
    train, val = _split_data(cfg, manifest, "train"), _split_data(cfg, manifest, "val")
    model = _build_model(cfg, train.x.shape[2:])
    out = _paths(cfg)["train"]
    session = fit(model, train, val, cfg.train, out_dir=out)
    print(f"trained {session.epoch} epochs, best val_loss {session.best_value:.4f} at epoch {session.best_epoch}; "
          f"checkpoints in {out}")
    return {"manifest": _paths(cfg)["manifest"]}


def _dice_scores(pred: np.ndarray, truth: np.ndarray) -> list[float]:
    return [dice_coefficient(p == 1, t == 1) for p, t in zip(pred, truth)]


def cmd_evaluate(cfg: RunConfig) -> dict:
    ev = cfg.section("evaluate")
    ckpt = _checkpoint(cfg)
    model = TrainingSession.load(ckpt).model
    data = _split_data(cfg, _manifest(cfg), ev["split"])
    out = cfg.output_dir / "evaluate"
    out.mkdir(parents=True, exist_ok=True)
    loss, _, outputs = evaluate(model, data, cfg.train.batch_size)
    if cfg.model_kind == "unet2d":
        dice = _dice_scores(outputs, data.y)
        cm = confusion(outputs.reshape(-1).astype(np.float64), data.y.reshape(-1), 0.5)
        report = classification_metrics(cm, unit="pixel").to_dict()
        report |= {"split": ev["split"], "loss": loss, "mean_dice": float(np.mean(dice)),
                   "mean_dice_2dp": f"{np.mean(dice):.2f}", "per_slice_dice": dict(zip(data.ids, dice))}
        emit_report(report, out / "report.json")
        print(f"{ev['split']}: mean DSC {np.mean(dice):.4f} over {len(dice)} slices")
    else:
        cm = confusion(outputs, data.y, ev["threshold"])
        unit = "subject" if cfg.model_kind == "resnet3d" else "slice"
        rep = classification_metrics(cm, unit=unit, threshold=ev["threshold"])
        emit_report(rep, out / "report.json", {"split": ev["split"], "loss": loss})
        write_predictions_csv(out / "predictions.csv", data.ids, outputs, data.y, ev["threshold"])
        print(f"{ev['split']}: accuracy {100 * rep.accuracy:.2f}% (tp={cm.tp} fp={cm.fp} fn={cm.fn} tn={cm.tn})")
    return {"checkpoint": ckpt, "manifest": _paths(cfg)["manifest"]}


def cmd_explain(cfg: RunConfig) -> dict:
    ex = cfg.section("explain")
    if cfg.model_kind == "unet2d":
        raise ConfigError("model.kind: explain needs a classifier; use 'segment' for the U-Net")
    ckpt = _checkpoint(cfg)
    model = TrainingSession.load(ckpt).model
    manifest = _manifest(cfg)
    subjects = manifest.split_subjects(ex["split"])
    if ex["subjects"] is not None:
        wanted = [str(s) for s in ex["subjects"]]
        subjects = [manifest.by_id(s) for s in wanted]
    probes = PROBE_LABELS if ex["probes"] == "all" else (ex["probes"],)
    out = cfg.output_dir / "explain"
    gt_dir = _paths(cfg)["root"] / "ground_truth"
    n, localization = 0, {}
    for rec in subjects:
        vol = read_volume(rec)
        if cfg.model_kind == "resnet3d":
            x, slice_index = vol[None], ex["slice_index"]
        else:
            z = ex["slice_index"] if ex["slice_index"] is not None else vol.shape[0] // 2
            if not 0 <= z < vol.shape[0]:
                raise ConfigError(f"explain.slice_index: {z} out of range for subject {rec.subject_id}")
            x, slice_index = vol[z][None], None
        maps = render_triptych(model, x, out, rec.subject_id, ex["target"], slice_index, ex["alpha"], probes,
                               ex["normalization"])
        n += len(maps)
        gt = gt_dir / f"{rec.subject_id}.json"
        if cfg.model_kind == "resnet3d" and gt.is_file():
            localization[rec.subject_id] = lesion_localization(model, x, maps, json.loads(gt.read_text()))
    if localization:
        emit_report({"subjects": localization, "dilation_fraction": BOX_DILATION}, out / "localization.json")
    print(f"wrote {n} overlays to {out}")
    return {"checkpoint": ckpt, "manifest": _paths(cfg)["manifest"]}


BOX_DILATION = 0.1


def lesion_localization(model, x, maps: dict, truth: dict) -> dict:
    """CAM peak position per probe versus the phantom lesion boxes (each grown by 10% of its extent)."""
    prob = float(ops._sigmoid(predict(model, x[None].astype(np.float32) / np.float32(255.0)).reshape(-1))[0])
    extents = x.shape[1:]
    boxes = [dilate_box(les["bbox"], BOX_DILATION, extents) for les in truth.get("lesions", [])]
    row = {"label": truth.get("label"), "probability": prob, "probes": {}}
    for probe, hm in maps.items():
        pos = argmax_position(hm.upsampled)
        row["probes"][probe] = {"argmax": list(pos), "inside_lesion_box": any(inside_box(pos, b) for b in boxes)}
    return row


def dilate_mask(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation with a (2r+1)-square structuring element."""
    m = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return m.copy()
    out = m.copy()
    h, w = m.shape
    padded = np.pad(m, radius)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out |= padded[dy : dy + h, dx : dx + w]
    return out


def cmd_segment(cfg: RunConfig) -> dict:
    sg = cfg.section("segment")
    if cfg.model_kind != "unet2d":
        raise ConfigError("model.kind: segment needs unet2d")
    ckpt = _checkpoint(cfg)
    model = TrainingSession.load(ckpt).model
    data = _split_data(cfg, _manifest(cfg), sg["split"])
    out = cfg.output_dir / "segment"
    out.mkdir(parents=True, exist_ok=True)
    dice, mass, rows = [], [], {}
    cls = sg["target_class"]
    for i, sid in enumerate(data.ids):
        xb, yb = data.batch([i])
        pred = predict(model, xb)[0].argmax(axis=0)
        subj, name = sid.split("/")
        mdir = out / "masks" / subj
        mdir.mkdir(parents=True, exist_ok=True)
        write_png(mdir / f"slice_{name}.png", (pred == 1).astype(np.uint8) * 255)
        d = dice_coefficient(pred == 1, yb[0] == 1)
        truth = (yb[0] == cls)
        row = {"dice": d}
        if truth.any():
            hm = seg_grad_cam(model, xb[0], target_class=cls, probe=sg["probe"])
            frac = mass_fraction(hm.upsampled, dilate_mask(truth, sg["dilation"]))
            row["cam_mass_inside"] = frac
            mass.append(frac)
            if i < sg["overlays"]:
                render_overlay(hm, data.x[i, 0], out / f"{subj}_{name}_seg_cam.png")
        dice.append(d)
        rows[sid] = row
    report = {"split": sg["split"], "mean_dice": float(np.mean(dice)), "mean_dice_2dp": f"{np.mean(dice):.2f}",
              "mean_cam_mass_inside": float(np.mean(mass)) if mass else None, "dilation": sg["dilation"],
              "target_class": cls, "probe": sg["probe"], "slices": rows}
    emit_report(report, out / "segment_report.json")
    print(f"{sg['split']}: mean DSC {report['mean_dice']:.4f}, Seg-Grad-CAM mass inside "
          f"{report['mean_cam_mass_inside']}")
    return {"checkpoint": ckpt, "manifest": _paths(cfg)["manifest"]}


def cmd_audit(cfg: RunConfig) -> dict:
    model = _build_model(cfg)
    report = audit_shapes(model)
    text = report.format() + (f"\nweighted layers: {model.weighted_layer_count()}"
                              f"\nparameters: {model.parameter_count()}\n")
    print(text, end="")
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    (cfg.output_dir / "audit.txt").write_text(text)
    return {}


COMMANDS = {
    "phantom-gen": cmd_phantom_gen,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "segment": cmd_segment,
    "audit": cmd_audit,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="volcam", description="Volumetric CNN classification with Grad-CAM.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="YAML run configuration (omit for all defaults)")
    ap.add_argument("--seed", type=int, help="override the config seed")
    ap.add_argument("--threads", type=int, help="cap BLAS worker threads")
    ap.add_argument("--out", help="override output_dir")
    ap.add_argument("--version", action="version", version=f"volcam {__version__}")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("threads: must be >= 1")
        cfg = parse_config(args.config, {"seed": args.seed, "threads": args.threads, "output_dir": args.out})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    try:
        if cfg.raw["threads"]:
            from threadpoolctl import threadpool_limits

            with threadpool_limits(limits=cfg.raw["threads"]):
                inputs = COMMANDS[args.subcommand](cfg)
        else:
            inputs = COMMANDS[args.subcommand](cfg)
        write_run_info(cfg, args.subcommand, args.config, inputs)
    except (ConfigError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        log.exception("%s failed", args.subcommand)
        print(f"runtime error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
