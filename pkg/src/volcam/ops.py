"""Differentiable operators over :class:`~volcam.tensor.Tensor`.

Every op computes its forward value with numpy and, when a tape is active and
an input is tracked, records a closure producing the input gradients.
"""
from __future__ import annotations

import itertools
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, record

PROB_CLAMP = 1e-7


def _tuple(v, n: int, what: str) -> tuple[int, ...]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * n
    v = tuple(int(x) for x in v)
    if len(v) != n:
        raise ValueError(f"{what} needs {n} entries, got {len(v)}")
    return v


def _pads(v, n: int) -> tuple[tuple[int, int], ...]:
    """Padding per spatial dim as ``(before, after)``; an int or a per-dim int means symmetric."""
    if isinstance(v, (int, np.integer)):
        v = [int(v)] * n
    v = list(v)
    if len(v) != n:
        raise ValueError(f"padding needs {n} entries, got {len(v)}")
    out = []
    for p in v:
        lo, hi = (int(p), int(p)) if isinstance(p, (int, np.integer)) else (int(p[0]), int(p[1]))
        if lo < 0 or hi < 0:
            raise ValueError(f"padding must be nonnegative, got {v}")
        out.append((lo, hi))
    return tuple(out)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _out_extent(size: int, k: int, s: int, p: tuple[int, int]) -> int:
    return (size + p[0] + p[1] - k) // s + 1


def _window_slices(offset: Sequence[int], stride: Sequence[int], out: Sequence[int]):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, stride, out))


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def conv_output_shape(in_spatial, kernel, stride, padding) -> tuple[int, ...]:
    pads = _pads(padding, len(in_spatial))
    return tuple(_out_extent(n, k, s, p) for n, k, s, p in zip(in_spatial, kernel, stride, pads))


def _unpad(a: np.ndarray, pads, in_sp) -> np.ndarray:
    return a[(slice(None), slice(None)) + tuple(slice(p[0], p[0] + s) for p, s in zip(pads, in_sp))]


def _im2col(xp: np.ndarray, ksize, stride, out_sp) -> np.ndarray:
    """(N, C, *padded) -> (N, C*K, P) with rows ordered (c, k...) and columns row-major over out."""
    nsp = len(ksize)
    axes = tuple(range(2, 2 + nsp))
    win = sliding_window_view(xp, ksize, axis=axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, s * (n - 1) + 1, s) for s, n in zip(stride, out_sp))]
    # win: (N, C, *out, *k) -> (N, C, *k, *out)
    order = (0, 1) + tuple(range(2 + nsp, 2 + 2 * nsp)) + axes
    n, c = xp.shape[:2]
    return np.ascontiguousarray(win.transpose(order)).reshape(n, c * int(np.prod(ksize)), -1)


def _col2im(dcols: np.ndarray, padded_shape, ksize, stride, out_sp) -> np.ndarray:
    n, c = padded_shape[:2]
    dcols = dcols.reshape((n, c) + tuple(ksize) + tuple(out_sp))
    dxp = np.zeros(padded_shape, dtype=dcols.dtype)
    for offset in itertools.product(*(range(k) for k in ksize)):
        dxp[(slice(None), slice(None)) + _window_slices(offset, stride, out_sp)] += dcols[
            (slice(None), slice(None)) + offset
        ]
    return dxp


def conv_nd(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """N-d cross-correlation (no kernel flip) over a zero-padded input.

    ``x``: (N, Cin, *spatial); ``kernel``: (Cout, Cin, *k); ``bias``: (Cout,).
    ``padding`` per dim is an int (both sides) or a ``(before, after)`` pair.
    """
    if kernel.ndim < 3:
        raise ValueError(f"kernel must be (Cout, Cin, *k), got shape {kernel.shape}")
    nsp = kernel.ndim - 2
    if x.ndim != nsp + 2:
        raise ValueError(
            f"input rank {x.ndim} does not match kernel spatial rank {nsp} (expected input rank {nsp + 2})"
        )
    n, cin = x.shape[:2]
    cout, kcin = kernel.shape[:2]
    if kcin != cin:
        raise ValueError(f"channel dimension mismatch: input has Cin={cin}, kernel expects Cin={kcin}")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match Cout={cout}")
    ksize = kernel.shape[2:]
    stride = _tuple(stride, nsp, "stride")
    if min(stride) < 1:
        raise ValueError(f"stride must be positive, got {stride}")
    padding = _pads(padding, nsp)
    in_sp = x.shape[2:]
    out_sp = conv_output_shape(in_sp, ksize, stride, padding)
    for d, o in enumerate(out_sp):
        if o < 1:
            raise ValueError(
                f"zero-sized output along spatial dim {d}: in={in_sp[d]}, k={ksize[d]}, "
                f"stride={stride[d]}, pad={padding[d]}"
            )

    padded = any(lo or hi for lo, hi in padding)
    xd = x.data
    if padded:
        xd = np.pad(xd, ((0, 0), (0, 0)) + padding)
    padded_shape = xd.shape
    w2 = kernel.data.reshape(cout, -1)
    pointwise = all(k == 1 for k in ksize)
    if pointwise:
        cols = np.ascontiguousarray(xd[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)])
        cols = cols.reshape(n, cin, -1)
    else:
        cols = _im2col(xd, ksize, stride, out_sp)
    out = np.matmul(w2, cols)
    if bias is not None:
        out += bias.data[:, None]
    out = out.reshape((n, cout) + out_sp)
    result = Tensor(out)

    def backward(g):
        g2 = g.reshape(n, cout, -1)
        dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
        db = g2.sum(axis=(0, 2)) if bias is not None else None
        dcols = np.matmul(w2.T, g2)
        if pointwise:
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            dxp[(slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)] = dcols.reshape(
                (n, cin) + out_sp
            )
        else:
            dxp = _col2im(dcols, padded_shape, ksize, stride, out_sp)
        if padded:
            dxp = _unpad(dxp, padding, in_sp)
        return (np.ascontiguousarray(dxp), dw, db)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv_nd", inputs, result, backward)


# --------------------------------------------------------------------------
# pooling
# --------------------------------------------------------------------------

def pool_max_nd(x: Tensor, window, stride=None, padding=0) -> Tensor:
    """Per-window maximum; gradient goes to the first maximal element in scan order."""
    nsp = x.ndim - 2
    if nsp < 1:
        raise ValueError(f"pooling needs spatial dims, got shape {x.shape}")
    window = _tuple(window, nsp, "window")
    stride = window if stride is None else _tuple(stride, nsp, "stride")
    padding = _pads(padding, nsp)
    in_sp = x.shape[2:]
    for d in range(nsp):
        extent = in_sp[d] + sum(padding[d])
        if window[d] > extent:
            raise ValueError(f"pool window {window[d]} larger than padded input extent {extent} (dim {d})")
    out_sp = conv_output_shape(in_sp, window, stride, padding)
    padded = any(lo or hi for lo, hi in padding)
    xd = x.data
    if padded:
        xd = np.pad(xd, ((0, 0), (0, 0)) + padding, constant_values=-np.inf)
    padded_shape = xd.shape
    axes = tuple(range(2, 2 + nsp))
    win = sliding_window_view(xd, window, axis=axes)
    win = win[(slice(None), slice(None)) + tuple(slice(None, s * (m - 1) + 1, s) for s, m in zip(stride, out_sp))]
    flat = win.reshape(win.shape[: 2 + nsp] + (-1,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    result = Tensor(out)

    def backward(g):
        dxp = np.zeros(padded_shape, dtype=g.dtype)
        for i, offset in enumerate(itertools.product(*(range(k) for k in window))):
            hit = arg == i
            if hit.any():
                dxp[(slice(None), slice(None)) + _window_slices(offset, stride, out_sp)] += np.where(hit, g, 0)
        if padded:
            dxp = _unpad(dxp, padding, in_sp)
        return (np.ascontiguousarray(dxp),)

    return record("pool_max_nd", (x,), result, backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over all spatial positions: (N, C, *spatial) -> (N, C)."""
    if x.ndim < 3:
        raise ValueError(f"global_avg_pool needs spatial dims, got shape {x.shape}")
    n, c = x.shape[:2]
    count = int(np.prod(x.shape[2:]))
    result = Tensor(x.data.reshape(n, c, -1).mean(axis=2))

    def backward(g):
        return (np.broadcast_to((g / count)[(...,) + (None,) * (x.ndim - 2)], x.shape).copy(),)

    return record("global_avg_pool", (x,), result, backward)


# --------------------------------------------------------------------------
# normalization
# --------------------------------------------------------------------------

class BatchNormState:
    """Running statistics for one normalization layer."""

    def __init__(self, channels: int, dtype=np.float32):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState | None = None,
    mode: str = "train",
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization.

    Train mode normalizes with the biased batch variance and updates running
    stats as ``running = (1 - momentum) * running + momentum * batch`` using the
    unbiased variance. Infer mode uses the running stats.
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"gamma/beta must have shape ({c},), got {gamma.shape} and {beta.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    m = x.data.size // c
    if mode == "train":
        if m < 2:
            raise ValueError("batch_norm in train mode needs at least 2 elements per channel (variance undefined)")
        mean = x.data.mean(axis=axes)
        xc = x.data - mean.reshape(bshape)
        var = np.mean(xc * xc, axis=axes)
        if state is not None:
            state.mean[...] = (1 - momentum) * state.mean + momentum * mean
            state.var[...] = (1 - momentum) * state.var + momentum * var * (m / (m - 1))
    elif mode == "infer":
        if state is None:
            raise ValueError("infer mode needs running statistics")
        mean = state.mean.astype(x.dtype)
        var = state.var.astype(x.dtype)
        xc = x.data - mean.reshape(bshape)
    else:
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = xc * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)
    result = Tensor(out)

    def backward(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        gx = g * gamma.data.reshape(bshape)
        if mode == "train":
            dx = inv.reshape(bshape) * (
                gx - gx.mean(axis=axes).reshape(bshape) - xhat * (gx * xhat).mean(axis=axes).reshape(bshape)
            )
        else:
            dx = gx * inv.reshape(bshape)
        return (dx, dgamma, dbeta)

    return record("batch_norm", (x, gamma, beta), result, backward)


# --------------------------------------------------------------------------
# dense, elementwise
# --------------------------------------------------------------------------

def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight + bias`` with weight of shape (F, G)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape} vs weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match output width {weight.shape[1]}")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    result = Tensor(out)

    def backward(g):
        return (g @ weight.data.T, x.data.T @ g, g.sum(axis=0) if bias is not None else None)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", inputs, result, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    result = Tensor(np.where(mask, x.data, 0).astype(x.dtype, copy=False))
    return record("relu", (x,), result, lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    result = Tensor(s)
    return record("sigmoid", (x,), result, lambda g: (g * s * (1 - s),))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    """Softmax over the channel dimension."""
    if x.ndim < 2:
        raise ValueError(f"softmax needs a channel dimension, got shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    result = Tensor(s)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return record("softmax", (x,), result, backward)


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "softmax":
        return softmax(x, axis=1)
    raise ValueError(f"unknown activation {kind!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add needs identical shapes, got {a.shape} and {b.shape}")
    return record("add", (a, b), Tensor(a.data + b.data), lambda g: (g, g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product of equal-shaped operands; ``b`` may be a plain array."""
    b = _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul needs identical shapes, got {a.shape} and {b.shape}")
    return record("mul", (a, b), Tensor(a.data * b.data), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    return record("scale", (a,), Tensor(a.data * c), lambda g: (g * c,))


def sum_all(a: Tensor) -> Tensor:
    result = Tensor(np.asarray(a.data.sum(), dtype=a.dtype).reshape(()))
    return record("sum", (a,), result, lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along an axis (U-Net skip connections use the channel axis)."""
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(base) or any(a != b for i, (a, b) in enumerate(zip(t.shape, base)) if i != axis):
            raise ValueError(f"concat shape mismatch: {base} vs {t.shape} off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    result = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return record("concat", tuple(tensors), result, backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return record("reshape", (a,), Tensor(a.data.reshape(shape)), lambda g: (g.reshape(a.shape),))


# --------------------------------------------------------------------------
# upsampling
# --------------------------------------------------------------------------

def linear_weights(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """(n_out, n_in) matrix of 1-d linear interpolation, pixel-center aligned.

    Output sample ``t`` sits at source coordinate ``(t + 0.5) * n_in / n_out - 0.5``,
    clamped to ``[0, n_in - 1]`` (the align-corners-false convention).
    """
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == n_out:
        np.fill_diagonal(m, 1)
        return m
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = pos - i0
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1 - w)
    np.add.at(m, (rows, i1), w)
    return m


def _apply_axis(x: np.ndarray, m: np.ndarray, axis: int) -> np.ndarray:
    moved = np.moveaxis(x, axis, -1)
    return np.ascontiguousarray(np.moveaxis(moved @ m.T, -1, axis))


def upsample_nd(x: Tensor, factor, mode: str = "nearest") -> Tensor:
    """Integer-factor upsampling of the spatial dims.

    ``nearest`` replicates each element into a block; ``linear`` applies
    separable interpolation with :func:`linear_weights`.
    """
    nsp = x.ndim - 2
    factor = _tuple(factor, nsp, "factor")
    if min(factor) < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    if mode == "nearest":
        out = x.data
        for d, f in enumerate(factor):
            if f > 1:
                out = np.repeat(out, f, axis=2 + d)
        out = np.ascontiguousarray(out)

        def backward(g):
            gs = g
            for d, f in enumerate(factor):
                if f > 1:
                    sh = gs.shape
                    gs = gs.reshape(sh[: 2 + d] + (sh[2 + d] // f, f) + sh[3 + d :]).sum(axis=3 + d)
            return (gs,)

    elif mode == "linear":
        mats = [linear_weights(n, n * f, x.dtype) for n, f in zip(x.shape[2:], factor)]
        out = x.data
        for d, m in enumerate(mats):
            if factor[d] > 1:
                out = _apply_axis(out, m, 2 + d)

        def backward(g):
            gs = g
            for d, m in enumerate(mats):
                if factor[d] > 1:
                    gs = _apply_axis(gs, m.T, 2 + d)
            return (gs,)

    else:
        raise ValueError(f"unknown upsample mode {mode!r}")
    return record("upsample_nd", (x,), Tensor(out), backward)


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------

def bce_loss(logit: Tensor, label) -> Tensor:
    """Mean binary cross entropy of ``sigmoid(logit)`` against 0/1 labels.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]``; inside the clamp the
    gradient w.r.t. the logit is ``(p - y) / N``, outside it is zero.
    """
    y = np.asarray(label, dtype=logit.dtype).reshape(-1)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError(f"labels must be binary 0/1, got {np.unique(y)}")
    z = logit.data.reshape(-1)
    if z.shape != y.shape:
        raise ValueError(f"logit has {z.size} entries but {y.size} labels were given")
    p_raw = _sigmoid(z)
    p = np.clip(p_raw, PROB_CLAMP, 1 - PROB_CLAMP)
    n = z.size
    loss = -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p))
    result = Tensor(np.asarray(loss, dtype=logit.dtype).reshape(()))
    inside = (p_raw > PROB_CLAMP) & (p_raw < 1 - PROB_CLAMP)

    def backward(g):
        return ((g * np.where(inside, (p - y) / n, 0)).reshape(logit.shape).astype(logit.dtype),)

    return record("bce_loss", (logit,), result, backward)


def pixel_ce_loss(probs: Tensor, mask) -> Tensor:
    """Mean over pixels of ``-ln p[true class]`` for a (N, K, *spatial) softmax output."""
    mask = np.asarray(mask)
    expected = (probs.shape[0],) + probs.shape[2:]
    if mask.shape != expected:
        raise ValueError(f"mask shape {mask.shape} does not match prediction spatial shape {expected}")
    if not np.all((mask >= 0) & (mask < probs.shape[1])):
        raise ValueError("mask values must be class indices")
    idx = mask.astype(np.int64)[:, None]
    pt_raw = np.take_along_axis(probs.data, idx, axis=1)
    pt = np.clip(pt_raw, PROB_CLAMP, 1 - PROB_CLAMP)
    count = mask.size
    loss = -np.log(pt).mean()
    result = Tensor(np.asarray(loss, dtype=probs.dtype).reshape(()))
    inside = (pt_raw > PROB_CLAMP) & (pt_raw < 1 - PROB_CLAMP)

    def backward(g):
        d = np.zeros_like(probs.data)
        np.put_along_axis(d, idx, np.where(inside, -g / (pt * count), 0).astype(probs.dtype), axis=1)
        return (d,)

    return record("pixel_ce_loss", (probs,), result, backward)
