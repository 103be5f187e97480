"""Bounded scalar maximisation, vectorised over a batch of independent problems.

Each row of the batch is maximised by a grid prescan followed by a
golden-section search inside the bracket around the best grid point. Rows
are updated only while their own bracket is wider than the tolerance, so a
row's trajectory does not depend on what else is in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ConvergenceError

_GOLD = (3.0 - np.sqrt(5.0)) / 2.0

# f(theta, rows) -> values; theta has shape (len(rows), k)
Objective = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BatchMax:
    x: np.ndarray
    fx: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray
    at_lower: np.ndarray
    at_upper: np.ndarray


def _clean(v):
    return np.where(np.isnan(v), -np.inf, v)


def maximize_batched(f: Objective, grid: np.ndarray, rtol: float = 1e-10, atol: float = 0.0,
                     max_iter: int = 500) -> BatchMax:
    """Maximise ``f`` row-wise over ``[grid[:, 0], grid[:, -1]]``.

    ``grid`` has shape (B, G) with each row sorted ascending; its first and
    last columns are the bounds and are themselves candidate solutions, so
    boundary optima are returned exactly. Convergence is declared when the
    golden-section bracket is narrower than ``rtol * |x| + atol`` (``atol``
    may be given per row).
    """
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    B, G = grid.shape
    rows = np.arange(B)
    atol = np.broadcast_to(np.asarray(atol, dtype=float), (B,))
    gv = _clean(f(grid, rows))
    dead = ~np.isfinite(gv).any(axis=1)
    if dead.any():
        raise ConvergenceError(
            f"objective is not finite anywhere on the search grid (batch rows {np.flatnonzero(dead)[:5].tolist()})"
        )
    k = np.argmax(gv, axis=1)
    a = grid[rows, np.maximum(k - 1, 0)].copy()
    c = grid[rows, np.minimum(k + 1, G - 1)].copy()
    x1 = a + _GOLD * (c - a)
    x2 = c - _GOLD * (c - a)
    fv = _clean(f(np.column_stack([x1, x2]), rows))
    f1, f2 = fv[:, 0].copy(), fv[:, 1].copy()

    def wide(r):
        return (c[r] - a[r]) > rtol * 0.5 * np.abs(a[r] + c[r]) + atol[r]

    iters = np.zeros(B, dtype=int)
    active = wide(rows)
    for _ in range(max_iter):
        act = np.flatnonzero(active)
        if act.size == 0:
            break
        left = f1[act] >= f2[act]
        L, R = act[left], act[~left]
        # maximum lies in [a, x2]
        c[L] = x2[L]
        x2[L] = x1[L]
        f2[L] = f1[L]
        x1[L] = a[L] + _GOLD * (c[L] - a[L])
        # maximum lies in [x1, c]
        a[R] = x1[R]
        x1[R] = x2[R]
        f1[R] = f2[R]
        x2[R] = c[R] - _GOLD * (c[R] - a[R])
        new = np.where(left, x1[act], x2[act])
        fn = _clean(f(new[:, None], act)[:, 0])
        f1[L] = fn[left]
        f2[R] = fn[~left]
        iters[act] += 1
        active[act] = wide(act)

    use1 = f1 >= f2
    x = np.where(use1, x1, x2)
    fx = np.where(use1, f1, f2)
    gbest = gv[rows, k]
    take_grid = gbest >= fx
    x = np.where(take_grid, grid[rows, k], x)
    fx = np.where(take_grid, gbest, fx)
    # a bound whose value matches the maximum to rounding is the reported
    # optimum: the likelihood is flat there and the bound is the exact answer
    tie = 1e-12 * (1.0 + np.abs(fx))
    for j in (G - 1, 0):
        snap = gv[:, j] >= fx - tie
        x = np.where(snap, grid[:, j], x)
        fx = np.where(snap, np.maximum(gv[:, j], fx), fx)
    return BatchMax(
        x=x,
        fx=fx,
        iterations=iters,
        converged=~active,
        at_lower=x == grid[:, 0],
        at_upper=x == grid[:, -1],
    )
