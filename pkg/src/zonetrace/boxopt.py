"""Bounded derivative-free maximization with random multi-starts.

A thin contract over the simplex search so hyperparameter estimation does
not care which optimizer sits underneath. The objective is maximized over
an axis-aligned box; candidate starts are the caller's initial point plus
uniform draws inside the box.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Optional

import numpy as np
import scipy.optimize

from .errors import OptimizationFailed


@dataclasses.dataclass(frozen=True)
class BoxResult:
    x: np.ndarray
    value: float
    nfev: int
    starts: int


def maximize_in_box(objective: Callable[[np.ndarray], float],
                    bounds: np.ndarray,
                    x0: Optional[np.ndarray] = None,
                    restarts: int = 10,
                    rng: Optional[np.random.Generator] = None,
                    maxiter: int = 400,
                    xatol: float = 1e-4,
                    fatol: float = 1e-6) -> BoxResult:
    """Maximize objective(x) for x inside bounds (shape (d, 2)).

    Runs a simplex search from x0 (defaulting to the box center) and from
    restarts - 1 random interior points, returning the best point found.
    Raises OptimizationFailed when no start produces a finite value.
    """
    bounds = np.asarray(bounds, dtype=float)
    if bounds.ndim != 2 or bounds.shape[1] != 2:
        raise ValueError("bounds must have shape (d, 2)")
    lo, hi = bounds[:, 0], bounds[:, 1]
    if np.any(hi <= lo):
        raise ValueError("each upper bound must exceed its lower bound")
    rng = rng or np.random.default_rng(0)

    starts = [np.clip(np.asarray(x0, dtype=float), lo, hi)
              if x0 is not None else 0.5 * (lo + hi)]
    for _ in range(max(restarts - 1, 0)):
        starts.append(lo + (hi - lo) * rng.uniform(size=len(lo)))

    def negated(x: np.ndarray) -> float:
        value = objective(x)
        if not np.isfinite(value):
            return 1e300
        return -value

    best_x = None
    best_value = -np.inf
    nfev = 0
    for start in starts:
        result = scipy.optimize.minimize(
            negated, start, method="Nelder-Mead",
            bounds=scipy.optimize.Bounds(lo, hi),
            options={"maxiter": maxiter, "xatol": xatol, "fatol": fatol})
        nfev += result.nfev
        if np.isfinite(result.fun) and -result.fun > best_value:
            best_value = -result.fun
            best_x = np.clip(result.x, lo, hi)
    if best_x is None:
        raise OptimizationFailed(
            "no start point produced a finite objective value")
    return BoxResult(x=best_x, value=best_value, nfev=nfev, starts=len(starts))
