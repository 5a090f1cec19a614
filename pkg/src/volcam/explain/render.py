"""Heat-map overlays: shipped 256-entry colormap, alpha blending over the grayscale input, PNG + JSON sidecar."""
from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from ..data.io import write_png
from ..data.preprocess import round_half_up
from ..models.resnet import PROBE_LABELS
from .gradcam import Heatmap, argmax_position, grad_cam, normalize_heatmap

COLORMAP_FILE = "bluered256.txt"


@lru_cache(maxsize=None)
def _shipped_table() -> bytes:
    return resources.files(__package__).joinpath(COLORMAP_FILE).read_bytes()


def load_colormap(path=None) -> np.ndarray:
    """(256, 3) uint8 table; defaults to the packaged blue->red table."""
    text = Path(path).read_text() if path else _shipped_table().decode()
    rows = [ln.split() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    table = np.array(rows, dtype=np.int64)
    if table.shape != (256, 3) or table.min() < 0 or table.max() > 255:
        raise ValueError(f"colormap must have 256 rows of three 0..255 values, got shape {table.shape}")
    return table.astype(np.uint8)


def _as_gray8(underlay: np.ndarray) -> np.ndarray:
    u = np.asarray(underlay)
    if u.dtype == np.uint8:
        return u
    if u.min() < 0 or u.max() > 1:
        raise ValueError("float underlay must lie in [0, 1]")
    return round_half_up(u * 255.0).astype(np.uint8)


def blend_overlay(map_: np.ndarray, underlay: np.ndarray, colormap: np.ndarray | None = None,
                  alpha: float = 0.5, slice_index: int | None = None) -> np.ndarray:
    """RGB uint8 image: ``(1 - alpha) * gray + alpha * table[round(255 * map)]``.

    3D inputs are cut at ``slice_index`` along the first axis.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    m = np.asarray(map_, dtype=np.float64)
    u = np.asarray(underlay)
    if m.ndim == 3:
        if slice_index is None:
            raise ValueError("a volumetric map needs a slice index")
        if not 0 <= slice_index < m.shape[0]:
            raise IndexError(f"slice index {slice_index} out of range for depth {m.shape[0]}")
        m = m[slice_index]
        if u.ndim == 3:
            u = u[slice_index]
    if m.shape != u.shape:
        raise ValueError(f"map shape {m.shape} does not match underlay shape {u.shape}")
    if m.min() < 0 or m.max() > 1 + 1e-9:
        raise ValueError("map must be normalized to [0, 1]")
    table = load_colormap() if colormap is None else colormap
    idx = round_half_up(np.clip(m, 0, 1) * 255.0).astype(np.intp)
    gray = _as_gray8(u).astype(np.float64)[..., None]
    rgb = (1.0 - alpha) * gray + alpha * table[idx].astype(np.float64)
    return round_half_up(rgb).astype(np.uint8)


def render_overlay(heatmap: Heatmap | np.ndarray, underlay, path, colormap=None, alpha: float = 0.5,
                   slice_index: int | None = None, normalization: str = "max") -> dict:
    """Write the overlay PNG and a ``.json`` sidecar next to it; returns the sidecar content."""
    hm = heatmap if isinstance(heatmap, Heatmap) else Heatmap(np.asarray(heatmap), np.asarray(heatmap))
    norm, degenerate = normalize_heatmap(hm.upsampled, normalization)
    if normalization == "none" and norm.max() > 1:
        raise ValueError("un-normalized map exceeds 1; use normalization='max'")
    rgb = blend_overlay(norm, underlay, colormap, alpha, slice_index)
    path = Path(path)
    write_png(path, rgb)
    flags = sorted(set(hm.flags) | ({"degenerate"} if degenerate else set()))
    sidecar = {
        "provenance": hm.provenance,
        "normalization": normalization,
        "alpha": alpha,
        "slice_index": slice_index,
        "colormap": COLORMAP_FILE if colormap is None else "custom",
        "stats": hm.stats(),
        "flags": flags,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True, indent=2) + "\n")
    return sidecar


def render_triptych(model, x, out_dir, stem: str, target: str = "cad", slice_index: int | None = None,
                    alpha: float = 0.5, probes=PROBE_LABELS, normalization: str = "max") -> dict[str, Heatmap]:
    """One overlay per probe depth, named ``<stem>_first.png``, ``_middle``, ``_last``.

    For volumetric inputs with ``slice_index=None`` every panel shows the
    slice holding the peak of the last probe's map (or of the deepest probe requested).
    Returns the heat maps by probe label; each provenance records its ``file``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vol = np.asarray(x)
    underlay = vol[0] if vol.ndim == len(model.input_signature[1]) + 1 else vol
    maps = {probe: grad_cam(model, x, probe=probe, target=target) for probe in probes}
    if underlay.ndim == 3 and slice_index is None:
        slice_index = argmax_position(maps[probes[-1]].upsampled)[0]
    for probe, hm in maps.items():
        p = out_dir / f"{stem}_{probe}.png"
        hm.provenance["file"] = p.name
        render_overlay(hm, underlay, p, alpha=alpha, slice_index=slice_index, normalization=normalization)
    return maps
