"""8-bit grayscale / RGB PNG read-write (bit-exact round trip)."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image


def read_png(path) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P", "1") and not im.mode.startswith("I"):
                raise ValueError(f"{path}: expected a single-channel 8-bit image, got mode {im.mode}")
            arr = np.asarray(im.convert("L") if im.mode != "L" else im, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"unreadable image {path}: {exc}") from None
    return arr.copy()


def write_png(path, array: np.ndarray) -> None:
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError(f"{path}: values outside 0..255")
        arr = arr.astype(np.uint8)
    if arr.ndim == 2:
        im = Image.fromarray(arr, mode="L")
    elif arr.ndim == 3 and arr.shape[2] == 3:
        im = Image.fromarray(arr, mode="RGB")
    else:
        raise ValueError(f"{path}: cannot write array of shape {arr.shape} as PNG")
    # fixed compression settings and no metadata keep files byte-identical across runs
    im.save(path, format="PNG", optimize=False, compress_level=6)
