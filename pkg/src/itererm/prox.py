"""One-dimensional proximal operators for convex scalar functions.

prox_{V f}(x) = argmin_z  0.5 * (z - x)^2 + V * f(z)

solved as the root of g(z) = z - x + V f'(z), which is strictly increasing
(slope >= 1) whenever f is convex.  The solver is a safeguarded Newton
iteration with a bisection fallback inside a sign-changing bracket, fully
vectorized over batches of nodes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

MAX_ITER = 200
TOL = 1e-11


@dataclass(frozen=True)
class ScalarConvexFn:
    """A scalar convex function with two derivatives.

    All three callables map a z-array to an array of the same shape;
    per-node parameters (labels, weights, ...) are captured in the
    closures.  f2 must be >= 0 everywhere.
    """

    f: Callable[[np.ndarray], np.ndarray]
    f1: Callable[[np.ndarray], np.ndarray]
    f2: Callable[[np.ndarray], np.ndarray]


class ProxError(RuntimeError):
    """Raised when the prox Newton/bisection loop fails to converge.

    Carries the last bracket so a pathological loss can be diagnosed.
    """

    def __init__(self, message, index=None, lo=None, hi=None):
        super().__init__(message)
        self.index = index
        self.lo = lo
        self.hi = hi


def prox1d_batch(fn: ScalarConvexFn, V: float, x, tol: float = TOL,
                 max_iter: int = MAX_ITER, z0=None) -> np.ndarray:
    """Elementwise prox_{V f}(x) over an array of anchor points.

    Each element iterates until its own residual |z - x + V f'(z)| drops
    below tol * (1 + |x|); converged elements are frozen so the result is
    independent of what the rest of the batch does.  z0 optionally warm
    starts the iteration (clipped into the bracket).
    """
    if V <= 0:
        raise ValueError(f"prox requires V > 0, got {V}")
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return x.copy()

    scale = tol * (1.0 + np.abs(x))

    # initial bracket around x, expanded geometrically until g changes sign
    half = V * np.abs(fn.f1(x)) + 1.0
    lo = x - half
    hi = x + half
    for _ in range(60):
        g_lo = lo - x + V * fn.f1(lo)
        g_hi = hi - x + V * fn.f1(hi)
        bad = (g_lo > 0.0) | (g_hi < 0.0)
        if not bad.any():
            break
        half = half * 2.0
        lo = np.where(bad, x - half, lo)
        hi = np.where(bad, x + half, hi)
    else:
        raise ProxError("prox bracket expansion failed", lo=lo, hi=hi)

    z = x.copy() if z0 is None else np.clip(np.asarray(z0, dtype=float), lo, hi)
    done = np.zeros(x.shape, dtype=bool)
    prev_abs_g = np.full(x.shape, np.inf)
    for _ in range(max_iter):
        g = z - x + V * fn.f1(z)
        done = done | (np.abs(g) <= scale)
        if done.all():
            return z
        # shrink the bracket using the sign of g, then take a Newton step;
        # fall back to bisection when outside the bracket or when |g| fails
        # to halve (Newton can ping-pong inside the bracket at large V)
        pos = g > 0.0
        hi = np.where(~done & pos, z, hi)
        lo = np.where(~done & ~pos, z, lo)
        abs_g = np.abs(g)
        slow = abs_g > 0.5 * prev_abs_g
        prev_abs_g = abs_g
        step = g / (1.0 + V * fn.f2(z))
        z_new = z - step
        outside = (z_new <= lo) | (z_new >= hi)
        z_new = np.where(outside | slow, 0.5 * (lo + hi), z_new)
        z = np.where(done, z, z_new)

    bad_idx = int(np.argmax(~done))
    raise ProxError(
        f"prox did not converge in {max_iter} iterations at node {bad_idx}",
        index=bad_idx, lo=lo[bad_idx], hi=hi[bad_idx])


def prox1d(fn: ScalarConvexFn, V: float, x: float, tol: float = TOL,
           max_iter: int = MAX_ITER) -> float:
    """Scalar prox_{V f}(x); runs the batch routine on a length-1 array."""
    out = prox1d_batch(fn, V, np.array([float(x)]), tol=tol, max_iter=max_iter)
    return float(out[0])
