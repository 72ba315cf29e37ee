"""Dense convex quadratic programming with linear inequality constraints.

Solves ``min 1/2 x'Hx + f'x  s.t.  Gx <= h`` with a primal active-set method.
A feasible starting point comes from a phase-one linear program.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from .errors import Infeasible, MaxIterations


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray = None
    h: np.ndarray = None
    regularization: float = 0.0

    def __post_init__(self):
        self.H = np.asarray(self.H, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        n = len(self.f)
        self.G = np.zeros((0, n)) if self.G is None else np.asarray(self.G, dtype=float).reshape(-1, n)
        self.h = np.zeros(0) if self.h is None else np.asarray(self.h, dtype=float).reshape(-1)

    @property
    def n(self):
        return len(self.f)

    @property
    def H_reg(self):
        return self.H + self.regularization * np.eye(self.n)

    def objective(self, x):
        return 0.5 * x @ self.H @ x + self.f @ x


@dataclass
class QpSolution:
    x: np.ndarray
    multipliers: np.ndarray
    active: list
    iterations: int
    stationarity: float
    feasibility: float
    complementarity: float


def kkt_residuals(p: QpProblem, x, mu):
    grad = p.H_reg @ x + p.f + p.G.T @ mu
    slack = p.G @ x - p.h
    stat = float(np.linalg.norm(grad, np.inf))
    feas = float(max(0.0, slack.max(initial=0.0)))
    comp = float(np.abs(mu * slack).max(initial=0.0))
    return stat, feas, comp


def _feasible_start(G, h, tol):
    n = G.shape[1]
    m = G.shape[0]
    # maximise a common slack s (capped at 1): G x + s <= h
    c = np.zeros(n + 1)
    c[-1] = -1.0
    A = np.hstack([G, np.ones((m, 1))])
    bounds = [(None, None)] * n + [(None, 1.0)]
    res = linprog(c, A_ub=A, b_ub=h, bounds=bounds, method="highs")
    if res.status != 0 or res.x[-1] < -tol:
        raise Infeasible("no point satisfies the inequality constraints")
    return res.x[:n]


def _eqp_step(Hr, g, Gw):
    """Step p and multipliers for min 1/2 p'Hp + g'p s.t. Gw p = 0."""
    n = len(g)
    k = Gw.shape[0]
    if k == 0:
        return np.linalg.solve(Hr, -g), np.zeros(0)
    K = np.zeros((n + k, n + k))
    K[:n, :n] = Hr
    K[:n, n:] = Gw.T
    K[n:, :n] = Gw
    rhs = np.concatenate([-g, np.zeros(k)])
    sol = np.linalg.lstsq(K, rhs, rcond=None)[0]
    return sol[:n], sol[n:]


def solve_qp(p: QpProblem, max_iter=None, tol=1e-10) -> QpSolution:
    Hr = p.H_reg
    G, h = p.G, p.h
    n, m = p.n, len(h)
    if m == 0:
        x = np.linalg.lstsq(Hr, -p.f, rcond=None)[0]
        stat, feas, comp = kkt_residuals(p, x, np.zeros(0))
        return QpSolution(x, np.zeros(0), [], 0, stat, feas, comp)

    x = np.linalg.lstsq(Hr, -p.f, rcond=None)[0]
    if np.any(G @ x - h > tol * (1 + np.abs(h))):
        x = _feasible_start(G, h, tol)
    # scale for relative step thresholds
    xscale = 1.0 + np.linalg.norm(x)
    work = []
    at_min = False  # x minimises the objective on the current working set
    max_iter = max_iter or 50 * (n + m)
    for it in range(max_iter):
        grad = Hr @ x + p.f
        step, lam = _eqp_step(Hr, grad, G[work])
        if at_min or np.linalg.norm(step) <= 1e-12 * xscale:
            if not work or lam.min() >= -1e-12 * (1 + np.abs(grad).max()):
                break
            # drop the most negative multiplier
            work.pop(int(np.argmin(lam)))
            at_min = False
            continue
        Gp = G @ step
        alpha, block = 1.0, None
        for i in range(m):
            if i in work or Gp[i] <= 1e-14 * np.linalg.norm(G[i]) * np.linalg.norm(step):
                continue
            a = (h[i] - G[i] @ x) / Gp[i]
            if a < alpha:
                alpha, block = max(a, 0.0), i
        x = x + alpha * step
        if block is not None:
            work.append(block)
        at_min = block is None
    else:
        raise MaxIterations(f"active-set QP did not converge in {max_iter} iterations")

    mu = np.zeros(m)
    if work:
        # multipliers at the final point from the stationarity equations
        grad = Hr @ x + p.f
        lam = np.linalg.lstsq(G[work].T, -grad, rcond=None)[0]
        mu[work] = np.maximum(lam, 0.0)
    stat, feas, comp = kkt_residuals(p, x, mu)
    return QpSolution(x, mu, sorted(work), it + 1, stat, feas, comp)
