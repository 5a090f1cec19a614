"""Slice/volume preprocessing: min-max stretch, bilinear resize, slice-axis resampling.

Interpolation is pixel-centre aligned (output sample ``t`` maps to source
coordinate ``(t + 0.5) * n_in / n_out - 0.5``, clamped at the borders) and
8-bit outputs use round-half-up.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ..ops import linear_weights


class DegenerateInputWarning(UserWarning):
    pass


def round_half_up(values: np.ndarray) -> np.ndarray:
    return np.floor(np.asarray(values, dtype=np.float64) + 0.5)


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(round_half_up(values), 0, 255).astype(np.uint8)


@dataclass
class StretchResult:
    image: np.ndarray
    constant: bool


def histogram_stretch(image: np.ndarray) -> StretchResult:
    """Linear min-max stretch to 0..255.

    A constant image has no range to stretch; it maps to zeros and
    ``constant`` is set (a :class:`DegenerateInputWarning` is also emitted).
    """
    v = np.asarray(image, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("histogram_stretch needs finite values")
    lo, hi = v.min(), v.max()
    if hi == lo:
        warnings.warn("constant slice: stretch undefined, returning zeros", DegenerateInputWarning, stacklevel=2)
        return StretchResult(np.zeros(v.shape, dtype=np.uint8), True)
    return StretchResult(to_uint8((v - lo) / (hi - lo) * 255.0), False)


def resize_bilinear(image: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    h, w = image.shape
    th, tw = (int(t) for t in target)
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    if (th, tw) == (h, w):
        return np.asarray(image).copy()
    v = np.asarray(image, dtype=np.float64)
    out = linear_weights(h, th) @ v @ linear_weights(w, tw).T
    return to_uint8(out)


def resample_slices(volume: np.ndarray, target: int) -> np.ndarray:
    """Linear resampling along the slice axis (axis 0) to exactly ``target`` slices."""
    vol = np.asarray(volume)
    n = vol.shape[0]
    if target < 1:
        raise ValueError("target slice count must be >= 1")
    if n == target:
        return vol.copy()
    if n == 1:
        warnings.warn("single-slice volume: replicating instead of interpolating", DegenerateInputWarning, stacklevel=2)
        return np.repeat(vol, target, axis=0)
    m = linear_weights(n, target)
    flat = vol.reshape(n, -1).astype(np.float64)
    return to_uint8(m @ flat).reshape((target,) + vol.shape[1:])


def map_slice_coordinate(z: float, n_in: int, n_out: int) -> float:
    """Position of source slice coordinate ``z`` after resampling ``n_in`` -> ``n_out`` slices."""
    return (z + 0.5) * n_out / n_in - 0.5


def preprocess_volume(slices: np.ndarray, size: tuple[int, int] | None, n_slices: int | None) -> np.ndarray:
    """Stretch every slice, resize in-plane, then resample the slice axis."""
    out = []
    for s in slices:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateInputWarning)
            img = histogram_stretch(s).image
        if size is not None:
            img = resize_bilinear(img, size)
        out.append(img)
    vol = np.stack(out)
    if n_slices is not None:
        vol = resample_slices(vol, n_slices)
    return vol
