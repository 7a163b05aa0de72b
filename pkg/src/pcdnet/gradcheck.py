"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tensor, zero_grad


def numerical_grad(fn: Callable[[], Tensor], t: Tensor, step: float = 1e-5,
                   indices: Optional[Sequence[int]] = None, kink_retries: int = 0,
                   kink_tol: float = 1e-3) -> np.ndarray:
    """Central differences of the scalar ``fn()`` w.r.t. (a subset of) ``t``'s entries.

    ``t.data`` is perturbed in place and restored afterwards. Returns a flat
    array aligned with ``indices`` (all entries when omitted).

    With ``kink_retries`` > 0, an entry whose forward and backward one-sided
    slopes disagree (relative ``kink_tol``) has a non-differentiable point
    inside its stencil; the step is shrunk 10x and the entry re-evaluated.
    """
    flat = t.data.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.empty(len(idx), dtype=np.float64)
    f0 = fn().item() if kink_retries else None
    for j, i in enumerate(idx):
        orig = flat[i]
        h = step
        for attempt in range(kink_retries + 1):
            flat[i] = orig + h
            fp = fn().item()
            flat[i] = orig - h
            fm = fn().item()
            flat[i] = orig
            out[j] = (fp - fm) / (2 * h)
            if attempt == kink_retries:
                break
            fwd, bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(fwd - bwd) <= kink_tol * max(abs(fwd), abs(bwd), 1e-6 * max(1.0, abs(f0))):
                break
            h /= 10
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - n| / max(|a|, |n|, floor), taken elementwise then maxed."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def check_gradients(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-5,
                    max_entries: Optional[int] = None, rng=None, floor: float = 1e-6,
                    kink_retries: int = 0) -> float:
    """Worst relative error between backward() and finite differences over ``inputs``.

    When ``max_entries`` is set, only that many randomly chosen entries per
    input are compared. The denominator floor scales with ``max(1, |f|)``:
    rounding noise in a central difference grows with the loss magnitude, so
    a fixed floor would flag near-zero gradients of large losses.
    """
    zero_grad(inputs)
    out = fn()
    out.backward()
    floor = floor * max(1.0, abs(out.item()))
    rng = rng if rng is not None else np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        analytic = np.zeros(t.size) if t.grad is None else t.grad.reshape(-1)
        if max_entries is not None and t.size > max_entries:
            idx = np.sort(rng.choice(t.size, size=max_entries, replace=False))
        else:
            idx = np.arange(t.size)
        numeric = numerical_grad(fn, t, step, idx, kink_retries)
        worst = max(worst, relative_error(analytic[idx], numeric, floor))
    zero_grad(inputs)
    return worst
