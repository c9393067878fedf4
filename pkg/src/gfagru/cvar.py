"""Scenario-based minimum-CVaR portfolios.

For scenarios Y (n x N), confidence q and target R0 the problem is

    min_{w, a, u}  a + c * sum_j u_j,   c = 1 / ((1 - q) n)
    s.t.  u_j >= -w.Y_j - a,  u >= 0,  sum w = 1,  w.mu = R0,  w >= 0.

It is solved through its dual, which has only N + 1 equality rows:

    max  s + R0 t
    s.t. s + t mu_k + sum_j lam_j Y_jk + sig_k = 0   (k = 1..N)
         sum_j lam_j = 1,   0 <= lam_j <= c,   sig >= 0,   s, t free.

The dual is primal-feasible by construction (lam spread over the worst
equal-weight scenarios), so no phase one is needed.  Portfolio weights and
the VaR level are read off the simplex multipliers.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .genfactor import ScenarioMatrix
from .simplex import solve_from_basis


@dataclass
class CvarProblem:
    scenarios: np.ndarray
    q: float
    R0: float
    mu: np.ndarray | None = None
    tickers: tuple[str, ...] = ()

    def __post_init__(self):
        if isinstance(self.scenarios, ScenarioMatrix):
            self.tickers = self.tickers or self.scenarios.tickers
            self.scenarios = self.scenarios.returns
        self.scenarios = np.atleast_2d(np.asarray(self.scenarios, dtype=float))
        if self.scenarios.shape[0] < 1:
            raise ValueError("need at least one scenario")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if not np.isfinite(self.scenarios).all():
            raise ValueError("scenarios must be finite")
        self.mu = self.scenarios.mean(axis=0) if self.mu is None else np.asarray(self.mu, dtype=float)
        if self.mu.shape != (self.scenarios.shape[1],):
            raise ValueError("mu must have one entry per asset")


@dataclass
class CvarSolution:
    weights: np.ndarray | None
    var_threshold: float
    objective: float
    status: str  # "optimal" or "infeasible"
    iterations: int = 0
    tickers: tuple[str, ...] = field(default_factory=tuple)

    def as_record(self) -> dict:
        rec = {"status": self.status, "objective": self.objective, "var_threshold": self.var_threshold}
        if self.weights is not None:
            names = self.tickers or tuple(f"S{i}" for i in range(len(self.weights)))
            rec["weights"] = {t: float(w) for t, w in zip(names, self.weights)}
        return rec


def _tail_rank(q: float, n: int) -> int:
    # guard against q*n landing a hair above an integer
    return max(1, math.ceil(q * n - 1e-9))


def empirical_cvar(losses, q: float) -> tuple[float, float]:
    """(CVaR, VaR) of a loss sample at level q via the sorted minimizer.

    VaR is the ceil(q n)-th smallest loss, the left end of the minimizing
    interval; CVaR = VaR + sum((loss - VaR)+) / ((1 - q) n).
    """
    x = np.sort(np.asarray(losses, dtype=float).ravel())
    n = x.shape[0]
    if n < 1:
        raise ValueError("need at least one loss")
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    var = float(x[_tail_rank(q, n) - 1])
    cvar = var + float(np.maximum(x - var, 0.0).sum()) / ((1.0 - q) * n)
    return cvar, var


def lp_objective(scenarios, w, q: float) -> float:
    """CVaR LP objective at fixed weights with the slack variables optimized out."""
    return empirical_cvar(-np.asarray(scenarios) @ np.asarray(w), q)[0]


def solve(problem: CvarProblem, tol: float = 1e-10, feas_tol: float = 1e-12) -> CvarSolution:
    Y, q, R0, mu = problem.scenarios, problem.q, float(problem.R0), problem.mu
    n, N = Y.shape
    span = max(1.0, float(np.abs(mu).max()))
    if R0 > mu.max() + feas_tol * span or R0 < mu.min() - feas_tol * span:
        return CvarSolution(None, math.nan, math.nan, "infeasible", 0, problem.tickers)
    cap = 1.0 / ((1.0 - q) * n)

    # columns: s, t, lam_1..lam_n, sig_1..sig_N
    m = N + 1
    A = np.zeros((m, 2 + n + N))
    A[:N, 0] = 1.0
    A[:N, 1] = mu
    A[:N, 2:2 + n] = Y.T
    A[N, 2:2 + n] = 1.0
    A[:N, 2 + n:] = np.eye(N)
    b = np.zeros(m)
    b[N] = 1.0
    c = np.zeros(A.shape[1])
    c[0], c[1] = 1.0, R0
    lower = np.zeros(A.shape[1])
    upper = np.full(A.shape[1], np.inf)
    lower[:2] = -np.inf
    upper[2:2 + n] = cap

    # warm start: full weight on the worst equal-weight scenarios
    order = np.argsort(Y.mean(axis=1), kind="stable")
    full = min(int(math.floor(1.0 / cap + 1e-9)), n - 1)
    lam = np.zeros(n)
    lam[order[:full]] = cap
    rest = order[full]
    lam[rest] = min(cap, max(0.0, 1.0 - full * cap))
    exposure = Y.T @ lam
    x = np.concatenate([[-exposure.max(), 0.0], lam, np.zeros(N)])
    basis = np.concatenate([2 + n + np.arange(N), [2 + rest]])

    scale = max(1.0, float(np.abs(Y).max()))
    res = solve_from_basis(c, A, b, lower, upper, basis, x, tol=tol * scale)
    if res.status == "unbounded":
        return CvarSolution(None, math.nan, math.nan, "infeasible", res.iterations, problem.tickers)
    if res.status != "optimal":
        raise RuntimeError(f"CVaR simplex stopped with status {res.status}")
    w = np.clip(res.duals[:N], 0.0, None)
    w /= w.sum()
    _, var = empirical_cvar(-Y @ w, q)
    return CvarSolution(w, var, float(res.objective), "optimal", res.iterations, problem.tickers)


def frontier(scenarios, q: float, targets: Sequence[float], mu=None, workers: int = 1) -> list[CvarSolution]:
    """Independent solves over a list of targets; infeasible ones are flagged."""
    if len(targets) == 0:
        raise ValueError("targets must be nonempty")
    probs = [CvarProblem(scenarios, q, r, mu) for r in targets]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            return list(pool.map(solve, probs))
    return [solve(p) for p in probs]
