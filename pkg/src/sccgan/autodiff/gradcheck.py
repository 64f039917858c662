"""Central finite-difference checking of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward, precision

__all__ = ["GradCheckReport", "grad_check", "relative_errors"]

# Coordinates whose gradient is tiny compared to the largest one are judged
# against this fraction of the largest magnitude instead of their own.
SCALE_FLOOR = 0.1


@dataclass
class GradCheckReport:
    max_rel_error: float
    mean_rel_error: float
    n_checked: int
    tol: float
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tol)

    def __str__(self):
        verdict = "PASS" if self.passed else "FAIL"
        return (f"{verdict} max_rel={self.max_rel_error:.3e} mean_rel={self.mean_rel_error:.3e} "
                f"coords={self.n_checked} tol={self.tol:g}")


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, SCALE_FLOOR * max|n|)`` per coordinate (0 where both vanish)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    floor = SCALE_FLOOR * (np.max(np.abs(n)) if n.size else 0.0)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    err = np.abs(a - n)
    return np.where(denom > 0, err / np.where(denom > 0, denom, 1.0), 0.0)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x,
    tol: float = 1e-3,
    step: float = 1e-5,
    max_coords: int = 256,
    seed: int = 0,
) -> GradCheckReport:
    """Compare ``backward`` against central differences of the scalar ``f`` at ``x``.

    ``f`` rebuilds the graph from a fresh leaf on every call.  Coordinates are
    all of ``x`` when it has at most ``max_coords`` entries, else a random
    subset of that size (never fewer than 64).  The step is
    ``step * max(1, |x_i|)``.

    The difference quotients are always evaluated in float64 at the same
    point, so for float32 inputs the check measures the 32-bit backward pass
    against an oracle free of float32 cancellation.  That also allows a small
    default step, which keeps the stencil clear of the kinks (min, clamp, abs)
    in piecewise-smooth functions.
    """
    x0 = Tensor(x).data.copy()

    leaf = Tensor(x0, requires_grad=True, dtype=x0.dtype)
    out = f(leaf)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    backward(out)
    analytic_full = np.zeros(x0.shape) if leaf.grad is None else leaf.grad.astype(np.float64)

    n = x0.size
    if n <= max_coords:
        coords = np.arange(n)
    else:
        rng = np.random.default_rng(seed)
        coords = np.sort(rng.choice(n, size=min(n, max(64, max_coords)), replace=False))

    def value(arr):
        with precision(np.float64):
            return float(np.asarray(f(Tensor(arr, dtype=np.float64)).data, dtype=np.float64))

    numeric = np.empty(len(coords))
    flat = x0.reshape(-1).astype(np.float64)
    for k, i in enumerate(coords):
        h = step * max(1.0, abs(flat[i]))
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        numeric[k] = (value(xp.reshape(x0.shape)) - value(xm.reshape(x0.shape))) / (2.0 * h)

    analytic = analytic_full.reshape(-1)[coords]
    rel = relative_errors(analytic, numeric)
    return GradCheckReport(
        max_rel_error=float(rel.max(initial=0.0)),
        mean_rel_error=float(rel.mean()) if rel.size else 0.0,
        n_checked=len(coords),
        tol=tol,
        analytic=analytic,
        numeric=numeric,
    )
