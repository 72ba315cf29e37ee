from itertools import combinations

import numpy as np
import pytest

from objslam.errors import Infeasible
from objslam.qp import QpProblem, kkt_residuals, solve_qp


def enumerate_active_sets(H, f, G, h):
    """Minimum over all active sets whose equality-constrained solution is feasible."""
    n, m = len(f), len(h)
    best = np.inf
    for k in range(0, min(n, m) + 1):
        for S in combinations(range(m), k):
            S = list(S)
            A = G[S]
            K = np.block([[H, A.T], [A, np.zeros((k, k))]]) if k else H
            rhs = np.concatenate([-f, h[S]])
            try:
                sol = np.linalg.solve(K, rhs)
            except np.linalg.LinAlgError:
                continue
            x = sol[:n]
            if np.all(G @ x <= h + 1e-9):
                best = min(best, 0.5 * x @ H @ x + f @ x)
    return best


def random_problem(rng, n=None, m=None):
    n = n or int(rng.integers(2, 6))
    m = int(rng.integers(1, 13)) if m is None else m
    M = rng.normal(size=(n + 2, n))
    H = M.T @ M + 1e-3 * np.eye(n)
    f = rng.normal(size=n) * 3
    G = rng.normal(size=(m, n))
    # feasible by construction around a random point
    x0 = rng.normal(size=n)
    h = G @ x0 + rng.uniform(0.0, 1.0, m)
    return QpProblem(H, f, G, h)


def test_unconstrained_is_least_squares(rng):
    M = rng.normal(size=(12, 9))
    H, f = M.T @ M, rng.normal(size=9)
    sol = solve_qp(QpProblem(H, f))
    np.testing.assert_allclose(sol.x, np.linalg.lstsq(H, -f, rcond=None)[0], atol=1e-8)


def test_halfspace_projection():
    G = np.zeros((1, 9))
    G[0, 0] = -1.0
    sol = solve_qp(QpProblem(np.eye(9), np.zeros(9), G, [-1.0]))
    np.testing.assert_allclose(sol.x, np.eye(9)[0], atol=1e-12)
    assert sol.active == [0]


def test_matches_enumeration_oracle(rng):
    for _ in range(200):
        p = random_problem(rng)
        sol = solve_qp(p)
        ref = enumerate_active_sets(p.H, p.f, p.G, p.h)
        assert p.objective(sol.x) == pytest.approx(ref, rel=1e-6, abs=1e-6)


def test_kkt_contract(rng):
    for _ in range(200):
        p = random_problem(rng, n=9, m=int(rng.integers(5, 30)))
        sol = solve_qp(p)
        stat, feas, comp = kkt_residuals(p, sol.x, sol.multipliers)
        assert stat <= 1e-6 * (1 + np.linalg.norm(p.f))
        assert feas <= 1e-8
        assert comp <= 1e-6
        assert np.all(sol.multipliers >= 0)


def test_infeasible():
    G = np.array([[1.0, 0.0], [-1.0, 0.0]])
    with pytest.raises(Infeasible):
        solve_qp(QpProblem(np.eye(2), np.zeros(2), G, [-1.0, -1.0]))


def test_infeasible_start_is_repaired(rng):
    # unconstrained optimum violates every row, so the solver must find a start itself
    H = np.eye(3)
    f = -10 * np.ones(3)
    G = np.eye(3)
    sol = solve_qp(QpProblem(H, f, G, np.ones(3)))
    np.testing.assert_allclose(sol.x, np.ones(3), atol=1e-10)
