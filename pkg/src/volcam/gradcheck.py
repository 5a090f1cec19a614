"""Central-difference verification of tape gradients (run in float64)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: dict[str, float] = field(default_factory=dict)
    passed: dict[str, bool] = field(default_factory=dict)
    nonfinite: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.passed.values())


def rel_err(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(n)))


def grad_check(
    fn: Callable[..., Tensor],
    inputs: Mapping[str, np.ndarray],
    tol: float = 1e-4,
    h: float = 1e-4,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``fn(**tensors)`` with central differences.

    Every entry in ``inputs`` is promoted to a float64 tensor and differentiated.
    ``fn`` must be deterministic (e.g. fixed running stats, no RNG).
    """
    arrays = {}
    for name, a in inputs.items():
        a = np.array(a, dtype=np.float64)
        if not np.all(np.isfinite(a)):
            raise ValueError(f"input {name!r} contains non-finite values")
        arrays[name] = a

    tensors = {k: Tensor(v.copy(), dtype=np.float64) for k, v in arrays.items()}
    with Tape() as tape:
        tape.register_all(tensors)
        loss = fn(**tensors)
    if loss.dtype != np.float64:
        raise ValueError(f"grad_check needs a float64 graph, got {loss.dtype}")
    tape.zero_grad()
    tape.backward(loss)
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    def value(name, arr):
        args = {k: Tensor(v, dtype=np.float64) for k, v in arrays.items()}
        args[name] = Tensor(arr, dtype=np.float64)
        return fn(**args).data.item()

    report = GradCheckReport(max_rel_err=0.0)
    for name, base in arrays.items():
        an = analytic[name]
        bad = np.argwhere(~np.isfinite(an))
        if len(bad):
            report.nonfinite[name] = tuple(int(i) for i in bad[0])
            report.per_input[name] = float("inf")
            report.passed[name] = False
            report.max_rel_err = float("inf")
            continue
        numeric = np.zeros_like(base)
        probe = base.copy()
        for idx in np.ndindex(base.shape):
            orig = probe[idx]
            probe[idx] = orig + h
            up = value(name, probe)
            probe[idx] = orig - h
            down = value(name, probe)
            probe[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        err = float(rel_err(an, numeric).max()) if base.size else 0.0
        report.per_input[name] = err
        report.passed[name] = err < tol
        report.max_rel_err = max(report.max_rel_err, err)
    return report
