"""Central finite-difference gradient check over every parameter entry.

Perturbed forward passes are evaluated in chunks: the parameter under test is
swapped for a replicated buffer holding ``+h`` and ``-h`` variants of several
entries at once, and one no-grad forward pass returns all perturbed losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .tensor import SparseReplicas, Tensor, backward, no_grad


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float] = field(default_factory=dict)
    tol: float = 1e-4
    n_checked: int = 0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"gradcheck {status}: worst rel err {self.worst:.3e} over {self.n_checked} entries (tol {self.tol:g})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6, scale_frac: float = 1e-2) -> np.ndarray:
    """Entrywise |a - n| / max(|a|, |n|, floor, scale_frac * max|a|).

    Central differences carry an O(h^2) truncation error that is absolute, so
    entries whose gradient is tiny next to the rest of the same tensor get a
    denominator tied to that tensor's gradient scale instead of their own.
    """
    a, n = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.abs(a), np.abs(n))
    scale = scale_frac * float(np.abs(a).max()) if a.size else 0.0
    return np.abs(a - n) / np.maximum(denom, max(floor, scale))


def numeric_grad(loss_fn: Callable[[], Tensor], p: Tensor, h: float = 1e-4, chunk: int = 256) -> np.ndarray:
    """Central differences of ``loss_fn`` with respect to every entry of ``p``."""
    base = p.data
    flat = base.reshape(-1)
    n = flat.size
    numeric = np.empty(n)
    sparse = base.ndim == 2 and n > 4096
    try:
        with no_grad():
            for start in range(0, n, chunk):
                idx = np.arange(start, min(start + chunk, n))
                k = len(idx)
                both = np.concatenate([idx, idx])
                delta = np.concatenate([np.full(k, h), np.full(k, -h)])
                if sparse:
                    p.cache = SparseReplicas(base, both, delta)
                else:
                    reps = np.broadcast_to(flat, (2 * k, n)).copy()
                    reps[np.arange(2 * k), both] += delta
                    p.data = reps.reshape((2 * k,) + base.shape)
                p.rep = 2 * k
                losses = loss_fn().data.reshape(-1)
                if losses.size != 2 * k:
                    raise ValueError("loss_fn must reduce to a scalar per replica")
                numeric[idx] = (losses[:k] - losses[k:]) / (2 * h)
    finally:
        p.data = base
        p.rep = 0
        p.cache = None
    return numeric.reshape(base.shape)


def finite_diff_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor] | list[tuple[str, Tensor]],
    h: float = 1e-4,
    tol: float = 1e-4,
    chunk: int = 256,
) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` must rebuild the forward pass from the current parameter
    values on every call and return a scalar tensor.
    """
    named = list(params.items()) if isinstance(params, dict) else list(params)
    for _, p in named:
        p.grad = None
    backward(loss_fn(), [p for _, p in named])
    report = GradCheckReport(tol=tol)
    for name, p in named:
        err = relative_error(p.grad, numeric_grad(loss_fn, p, h, chunk))
        report.max_rel_error[name] = float(err.max()) if err.size else 0.0
        report.n_checked += err.size
    return report
