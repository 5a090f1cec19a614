"""Dense tensors and a define-by-run tape for reverse-mode differentiation.

Layout convention used everywhere in the package: batch first, channel
second, spatial dims last (``N, C, D, H, W`` for volumes, ``N, C, H, W``
for slices). Buffers are C-contiguous, i.e. row-major over ``shape``.
"""
from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 5

_tapes: list["Tape"] = []


class Tensor:
    """N-d float array with an optional gradient accumulator.

    Parameters are tensors created with ``requires_grad=True``; their ``grad``
    accumulates across backward passes until :meth:`zero_grad` is called.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "_tracked")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        if arr.ndim and min(arr.shape) < 1:
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._tracked = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def flatten(self) -> np.ndarray:
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


def from_flat(buffer: np.ndarray, shape: Sequence[int]) -> Tensor:
    """Rebuild a tensor from a row-major buffer."""
    buffer = np.asarray(buffer)
    if int(np.prod(shape)) != buffer.size:
        raise ValueError(f"buffer of {buffer.size} elements cannot take shape {tuple(shape)}")
    return Tensor(buffer.reshape(tuple(shape)))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; every op executed inside the block whose inputs
    are tracked appends a :class:`Node`. Nodes are appended in execution
    order, which is already a topological order.
    """

    nodes: list[Node] = field(default_factory=list)
    params: dict[str, Tensor] = field(default_factory=dict)

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def register(self, name: str, tensor: Tensor) -> Tensor:
        tensor.requires_grad = True
        tensor._tracked = True
        self.params[name] = tensor
        return tensor

    def register_all(self, params: dict[str, Tensor]) -> None:
        for name, t in params.items():
            self.register(name, t)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = np.zeros_like(p.data)

    def backward(
        self,
        loss: Tensor,
        wrt: Iterable[Tensor] = (),
        seed: np.ndarray | None = None,
        accumulate: bool = True,
    ) -> dict:
        """Accumulate d(loss)/d(param) into ``param.grad`` for every registered parameter.

        Repeated calls accumulate; call :meth:`zero_grad` in between to reset.
        Returns a mapping holding parameter gradients by name and, for every
        tensor in ``wrt``, its gradient keyed by the tensor object's id.
        With ``accumulate=False`` parameter ``.grad`` fields are left untouched
        and only the ``wrt`` gradients are returned.
        """
        if seed is None and loss.data.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
        if not loss._tracked:
            raise ValueError("loss is not on the tape (no tracked inputs)")
        keep = {id(t): t for t in wrt}
        grads: dict[int, np.ndarray] = {
            id(loss): np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=loss.dtype)
        }
        kept: dict[int, np.ndarray] = {}
        for node in reversed(self.nodes):
            oid = id(node.output)
            g = grads.pop(oid, None)
            if g is None:
                continue
            if oid in keep:
                kept[oid] = g
            in_grads = node.backward(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp._tracked:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        # leaves: whatever remains in ``grads`` belongs to tensors with no producing node
        for key, g in grads.items():
            if key in keep:
                kept[key] = g
        leaf_grads = grads
        out: dict = {}
        if not accumulate:
            return kept
        for name, p in self.params.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
            g = leaf_grads.get(id(p))
            if g is not None:
                p.grad += g.astype(p.dtype, copy=False)
            out[name] = p.grad
        for key, g in kept.items():
            out[key] = g
        return out


def active_tape() -> Tape | None:
    return _tapes[-1] if _tapes else None


@contextmanager
def no_tape():
    """Temporarily suspend recording (used for inference-only forwards)."""
    saved = _tapes[:]
    _tapes.clear()
    try:
        yield
    finally:
        _tapes.extend(saved)


def record(op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> Tensor:
    """Attach ``output`` to the active tape when any input is tracked."""
    tape = active_tape()
    if tape is not None and any(t._tracked for t in inputs):
        output._tracked = True
        tape.nodes.append(Node(op, tuple(inputs), output, backward))
    return output
