"""Bounded-variable revised simplex for dense problems with few rows.

Solves  max c.x  s.t.  A x = b,  lower <= x <= upper  (bounds may be
infinite).  Nonbasic variables sit at a finite bound, or anywhere for free
variables; the basis inverse is refactored every iteration, which is cheap
because the row count is small.  Pricing uses the largest reduced cost and
switches to Bland's smallest-index rule after a run of degenerate pivots.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class LPResult:
    status: str  # "optimal", "infeasible", "unbounded", "iteration_limit"
    x: np.ndarray | None
    duals: np.ndarray | None
    objective: float
    iterations: int
    basis: np.ndarray | None = None


def _initial_nonbasic(lower, upper):
    x = np.where(np.isfinite(lower), lower, np.where(np.isfinite(upper), upper, 0.0))
    return x.astype(float)


def solve_from_basis(c, A, b, lower, upper, basis, x, tol: float = 1e-9,
                     max_iter: int | None = None, stall_limit: int = 50) -> LPResult:
    """Primal simplex from a feasible basis.

    ``x`` gives the values of the nonbasic variables (basic entries are
    recomputed); it must leave the basic variables within their bounds.
    """
    c = np.asarray(c, dtype=float)
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    m, nv = A.shape
    basis = np.array(basis, dtype=int)
    if basis.shape != (m,):
        raise ValueError(f"basis must list {m} columns")
    x = np.array(x, dtype=float)
    is_basic = np.zeros(nv, dtype=bool)
    is_basic[basis] = True
    free = ~np.isfinite(lower) & ~np.isfinite(upper)
    max_iter = max_iter or 50 * (m + nv) + 1000
    scale = 1.0 + np.abs(b).max(initial=0.0)

    degenerate_run = 0
    bland = False
    for it in range(max_iter):
        B = A[:, basis]
        x[basis] = 0.0
        nonbasic_sum = A @ x
        try:
            x[basis] = np.linalg.solve(B, b - nonbasic_sum)
            pi = np.linalg.solve(B.T, c[basis])
        except np.linalg.LinAlgError:
            raise RuntimeError("simplex basis became singular") from None
        d = c - A.T @ pi
        d[is_basic] = 0.0

        movable = ~is_basic & ~free
        inc = movable & (d > tol) & (x < upper - tol * scale)
        dec = movable & (d < -tol) & (x > lower + tol * scale)
        fr = ~is_basic & free & (np.abs(d) > tol)
        cand = inc | dec | fr
        if not cand.any():
            return LPResult("optimal", x, pi, float(c @ x), it, basis)

        if fr.any():
            j = int(np.flatnonzero(fr)[0]) if bland else int(np.argmax(np.where(fr, np.abs(d), -1)))
        elif bland:
            j = int(np.flatnonzero(cand)[0])
        else:
            j = int(np.argmax(np.where(cand, np.abs(d), -1)))
        direction = 1.0 if d[j] > 0 else -1.0

        a = np.linalg.solve(B, A[:, j])
        delta = -direction * a  # change of x_B per unit step
        xb, lb, ub = x[basis], lower[basis], upper[basis]
        with np.errstate(divide="ignore", invalid="ignore"):
            lim = np.full(m, np.inf)
            neg = delta < -1e-12
            pos = delta > 1e-12
            lim[neg] = (xb[neg] - lb[neg]) / -delta[neg]
            lim[pos] = (ub[pos] - xb[pos]) / delta[pos]
        lim = np.maximum(lim, 0.0)
        own = upper[j] - lower[j]
        theta = min(lim.min(initial=np.inf), own)
        if not np.isfinite(theta):
            return LPResult("unbounded", None, None, np.inf, it, basis)

        degenerate_run = degenerate_run + 1 if theta <= tol else 0
        if degenerate_run > stall_limit:
            bland = True

        x[j] += direction * theta
        x[basis] = xb + theta * delta
        if own <= lim.min(initial=np.inf):
            continue  # bound flip, basis unchanged
        ties = np.flatnonzero(lim <= theta + 1e-15)
        r = int(ties[np.argmin(basis[ties])]) if bland else int(ties[np.argmax(np.abs(delta[ties]))])
        leaving = basis[r]
        x[leaving] = lb[r] if delta[r] < 0 else ub[r]
        is_basic[leaving] = False
        is_basic[j] = True
        basis[r] = j
    return LPResult("iteration_limit", x, None, float(c @ x), max_iter, basis)


def solve_lp(c, A, b, lower=None, upper=None, tol: float = 1e-9) -> LPResult:
    """Two-phase solve of  max c.x, A x = b, lower <= x <= upper.

    Phase one adds one artificial per row and maximizes minus their sum.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    m, nv = A.shape
    lower = np.zeros(nv) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(nv, np.inf) if upper is None else np.asarray(upper, dtype=float)
    if (lower > upper).any():
        return LPResult("infeasible", None, None, np.nan, 0)
    b = np.asarray(b, dtype=float)
    x0 = _initial_nonbasic(lower, upper)
    resid = b - A @ x0
    sign = np.where(resid >= 0, 1.0, -1.0)
    A1 = np.hstack([A, np.diag(sign)])
    lo1 = np.concatenate([lower, np.zeros(m)])
    up1 = np.concatenate([upper, np.full(m, np.inf)])
    c1 = np.concatenate([np.zeros(nv), -np.ones(m)])
    basis = np.arange(nv, nv + m)
    x1 = np.concatenate([x0, np.abs(resid)])
    res = solve_from_basis(c1, A1, b, lo1, up1, basis, x1, tol)
    if res.status != "optimal":
        return LPResult("infeasible", None, None, np.nan, res.iterations)
    if -res.objective > tol * (1 + np.abs(b).max(initial=0.0)) * 10:
        return LPResult("infeasible", None, None, np.nan, res.iterations)
    # phase two: artificials pinned at zero
    up1[nv:] = 0.0
    c2 = np.concatenate([np.asarray(c, dtype=float), np.zeros(m)])
    x2 = res.x.copy()
    x2[nv:] = np.clip(x2[nv:], 0.0, 0.0)
    res2 = solve_from_basis(c2, A1, b, lo1, up1, res.basis, x2, tol)
    x = None if res2.x is None else res2.x[:nv]
    return LPResult(res2.status, x, res2.duals, res2.objective, res.iterations + res2.iterations,
                    res2.basis)
