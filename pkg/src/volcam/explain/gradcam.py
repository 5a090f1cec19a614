"""Grad-CAM for the residual classifiers and Seg-Grad-CAM for the U-Net."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import ops
from ..models.graph import LayerGraph, forward
from ..models.resnet import PROBE_LABELS, select_probe_layer
from ..tensor import Tensor

TARGETS = ("cad", "normal")


@dataclass
class Heatmap:
    values: np.ndarray  # probe-grid map, >= 0
    upsampled: np.ndarray  # input-resolution map, >= 0
    provenance: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def stats(self) -> dict:
        u = self.upsampled
        return {
            "min": float(u.min()),
            "max": float(u.max()),
            "mean": float(u.mean()),
            "argmax": [int(i) for i in np.unravel_index(int(np.argmax(u)), u.shape)],
            "probe_shape": list(self.values.shape),
        }


def cam_from_gradients(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dScore/dA_k. Inputs are (K, *spatial)."""
    axes = tuple(range(1, activations.ndim))
    alpha = grads.mean(axis=axes)
    cam = np.tensordot(alpha, activations, axes=(0, 0))
    return np.maximum(cam, 0)


def upsample_to(cam: np.ndarray, spatial) -> np.ndarray:
    factor = []
    for have, want in zip(cam.shape, spatial):
        if want % have:
            raise ValueError(f"map extent {have} does not divide input extent {want}")
        factor.append(want // have)
    up = ops.upsample_nd(Tensor(cam[None, None].astype(np.float64)), factor, "linear")
    return np.maximum(up.data[0, 0], 0)


def _input_batch(model: LayerGraph, x) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype == np.uint8:
        x = x.astype(np.float32) / np.float32(255.0)
    if x.ndim == len(model.input_signature[1]):
        x = x[None]
    if x.ndim == len(model.input_signature[1]) + 1:
        x = x[None]
    return np.ascontiguousarray(x)


def _run_cam(model, batch, probe_node, score_fn, keep_extra=()):
    fp = forward(model, batch, "infer", record=True, keep=[probe_node, *keep_extra])
    act = fp.activations[probe_node]
    if act.ndim < 3:
        raise ValueError(f"probe layer {probe_node!r} has no spatial extent (shape {act.shape})")
    with fp.tape:
        score = score_fn(fp)
    grads = fp.tape.backward(score, wrt=[act], accumulate=False).get(id(act))
    if grads is None:
        grads = np.zeros_like(act.data)
    return act.data[0].astype(np.float64), grads[0].astype(np.float64), score.data.item()


def grad_cam(model: LayerGraph, x, probe: str = "last", target: str = "cad", score_scale: float = 1.0) -> Heatmap:
    """Grad-CAM of the single-logit classifier.

    ``target='cad'`` explains the logit, ``'normal'`` its negation.
    ``probe`` is ``first``/``middle``/``last`` or an explicit node id.
    """
    if target not in TARGETS:
        raise ValueError(f"target must be one of {TARGETS}, got {target!r}")
    node = select_probe_layer(model, probe) if probe in PROBE_LABELS else probe
    sign = 1.0 if target == "cad" else -1.0
    batch = _input_batch(model, x)
    if batch.shape[0] != 1:
        raise ValueError("grad_cam explains one input at a time")
    act, grads, score = _run_cam(model, batch, node, lambda fp: ops.scale(ops.sum_all(fp.output), sign * score_scale))
    cam = cam_from_gradients(act, grads)
    flags = ["zero_map"] if not cam.any() else []
    prov = {"model": model.fingerprint(), "model_kind": model.kind, "probe": probe, "layer": node,
            "target": target, "score": score, "method": "grad-cam"}
    return Heatmap(cam, upsample_to(cam, batch.shape[2:]), prov, flags)


def seg_grad_cam(model: LayerGraph, x, target_class: int = 1, pixels="all", probe: str = "bottleneck",
                 score_scale: float = 1.0) -> Heatmap:
    """Seg-Grad-CAM: the score is the sum of the class logit over ``pixels`` (a binary mask or "all")."""
    if model.config.get("family") != "unet":
        raise ValueError("seg_grad_cam needs the U-Net segmenter")
    batch = _input_batch(model, x)
    spatial = batch.shape[2:]
    if isinstance(pixels, str):
        if pixels != "all":
            raise ValueError(f"pixel set must be 'all' or a mask, got {pixels!r}")
        region = np.ones(spatial, dtype=bool)
    else:
        region = np.asarray(pixels).astype(bool)
        if region.shape != tuple(spatial):
            raise ValueError(f"pixel mask shape {region.shape} does not match input {tuple(spatial)}")
    if not region.any():
        raise ValueError("pixel set is empty")
    n_classes = model.config.get("classes", 2)
    if not 0 <= target_class < n_classes:
        raise ValueError(f"target class {target_class} out of range")
    node = model.probes.get(probe, probe)
    weight = np.zeros((1, n_classes) + tuple(spatial), dtype=batch.dtype)
    weight[0, target_class][region] = score_scale

    def score(fp):
        return ops.sum_all(ops.mul(fp.activations["logits"], weight))

    act, grads, s = _run_cam(model, batch, node, score, keep_extra=("logits",))
    cam = cam_from_gradients(act, grads)
    flags = []
    if not cam.any():
        flags.append("zero_map")
    elif np.ptp(cam) == 0:
        flags.append("constant_map")
    prov = {"model": model.fingerprint(), "model_kind": model.kind, "probe": probe, "layer": node,
            "target_class": int(target_class), "pixels": "all" if isinstance(pixels, str) else int(region.sum()),
            "score": s, "method": "seg-grad-cam"}
    return Heatmap(cam, upsample_to(cam, spatial), prov, flags)


def normalize_heatmap(values: np.ndarray, mode: str = "max") -> tuple[np.ndarray, bool]:
    """Scale to max 1. Returns ``(map, degenerate)``; an all-zero map passes through with ``degenerate`` set."""
    v = np.asarray(values, dtype=np.float64)
    if (v < 0).any():
        raise ValueError("heat map must be nonnegative")
    if mode == "none":
        return v.copy(), False
    if mode != "max":
        raise ValueError(f"unknown normalization mode {mode!r}")
    peak = v.max()
    if peak == 0:
        return v.copy(), True
    return v / peak, False


def argmax_position(values: np.ndarray) -> tuple[int, ...]:
    """First maximal position in row-major order."""
    return tuple(int(i) for i in np.unravel_index(int(np.argmax(values)), values.shape))


def dilate_box(bbox, fraction: float, extents) -> list[tuple[float, float]]:
    """Grow an inclusive voxel box by ``fraction`` of its own extent on each side, clipped to the volume."""
    out = []
    for (lo, hi), n in zip(bbox, extents):
        grow = fraction * (hi - lo + 1)
        out.append((max(0.0, lo - grow), min(n - 1.0, hi + grow)))
    return out


def inside_box(pos, box) -> bool:
    return all(lo <= p <= hi for p, (lo, hi) in zip(pos, box))


def mass_fraction(values: np.ndarray, region: np.ndarray) -> float:
    total = float(values.sum())
    if total == 0:
        return 0.0
    return float(values[region.astype(bool)].sum()) / total
