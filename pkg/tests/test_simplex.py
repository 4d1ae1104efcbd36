import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from tgppo.simplex import FEAS_TOL, LpProblem, LpStatus, solve_lp


def highs_status(p):
    bounds = [(None if not np.isfinite(lo) else lo, None if not np.isfinite(up) else up)
              for lo, up in zip(p.lower, p.upper)]
    kw = dict(A_ub=p.A if len(p.b) else None, b_ub=p.b if len(p.b) else None, bounds=bounds, method="highs")
    res = linprog(p.objective, **kw)
    if res.status == 0:
        return "OPTIMAL", res.fun
    if res.status == 3:
        return "UNBOUNDED", None
    if res.status == 2:
        # HiGHS sometimes reports an unbounded LP as infeasible; a zero
        # objective isolates the feasibility question
        feas = linprog(np.zeros_like(p.objective), **kw)
        return ("INFEASIBLE" if feas.status == 2 else "UNBOUNDED"), None
    raise AssertionError(f"oracle failed: {res.message}")


def random_lp(rng):
    m, n = int(rng.integers(0, 6)), int(rng.integers(1, 7))
    A = np.round(rng.uniform(-5, 5, size=(m, n)), 1)
    A[rng.random((m, n)) < 0.3] = 0.0
    b = np.round(rng.uniform(-3, 8, size=m), 1)
    c = np.round(rng.uniform(-4, 4, size=n), 1)
    lo = np.where(rng.random(n) < 0.15, -np.inf, np.round(rng.uniform(-3, 1, size=n), 1))
    up = np.where(rng.random(n) < 0.15, np.inf, lo + np.round(rng.uniform(0, 4, size=n), 1))
    up = np.where(np.isinf(lo) & np.isinf(up), np.inf, up)
    up = np.where(np.isinf(lo) & ~np.isinf(up), np.round(rng.uniform(-1, 3, size=n), 1), up)
    return LpProblem(c, A, b, lo, up)


def check_feasible(p, x):
    assert np.all(x >= p.lower - 1e-6) and np.all(x <= p.upper + 1e-6)
    if len(p.b):
        assert np.all(p.A @ x <= p.b + 1e-6)


def test_two_var_lp():
    out = solve_lp(LpProblem([-1, -2], [[1, 1]], [1.5], [0, 0], [1, 1]))
    assert out.status == LpStatus.OPTIMAL
    assert math.isclose(out.objective_value, -2.5, abs_tol=1e-9)
    np.testing.assert_allclose(out.solution, [0.5, 1.0], atol=1e-9)


def test_bound_only_problem():
    out = solve_lp(LpProblem([1.0], np.zeros((0, 1)), [], [3.0], [5.0]))
    assert out.status == LpStatus.OPTIMAL
    assert out.objective_value == 3.0 and out.solution[0] == 3.0


def test_unbounded_ray():
    out = solve_lp(LpProblem([-1.0], np.zeros((0, 1)), [], [0.0], [np.inf]))
    assert out.status == LpStatus.UNBOUNDED


def test_infeasible_rows():
    out = solve_lp(LpProblem([1.0, 1.0], [[1, 1], [-1, -1]], [1, -3], [0, 0], [5, 5]))
    assert out.status == LpStatus.INFEASIBLE


def test_against_highs_on_1000_random_lps():
    rng = np.random.default_rng(2024)
    mismatches = []
    for k in range(1000):
        p = random_lp(rng)
        status, value = highs_status(p)
        out = solve_lp(p)
        if out.status.value != status:
            mismatches.append((k, status, out.status))
            continue
        if status == "OPTIMAL":
            check_feasible(p, out.solution)
            assert math.isclose(out.objective_value, float(p.objective @ out.solution), abs_tol=1e-7)
            if not math.isclose(out.objective_value, value, rel_tol=1e-7, abs_tol=1e-7):
                mismatches.append((k, value, out.objective_value))
    assert not mismatches, mismatches[:5]


def test_warm_start_after_bound_change_matches_cold():
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(200):
        n = int(rng.integers(2, 8))
        m = int(rng.integers(1, 6))
        A = rng.uniform(0, 5, size=(m, n))
        p = LpProblem(-rng.uniform(1, 5, size=n), A, rng.uniform(2, 10, size=m), np.zeros(n), np.full(n, 3.0))
        parent = solve_lp(p)
        assert parent.status == LpStatus.OPTIMAL
        j = int(rng.integers(n))
        x = parent.solution[j]
        child_up = p.upper.copy()
        child_up[j] = math.floor(x) if x > 0.5 else 0.0
        child = LpProblem(p.objective, p.A, p.b, p.lower, child_up)
        warm = solve_lp(child, warm=parent.warm)
        cold = solve_lp(child)
        assert warm.status == cold.status
        if cold.status == LpStatus.OPTIMAL:
            check_feasible(child, warm.solution)
            assert math.isclose(warm.objective_value, cold.objective_value, rel_tol=1e-9, abs_tol=1e-9)
            checked += 1
    assert checked > 100


def test_iteration_guard():
    rng = np.random.default_rng(1)
    n = 30
    p = LpProblem(-rng.uniform(1, 2, n), rng.uniform(0, 1, (20, n)), np.ones(20), np.zeros(n), np.ones(n))
    out = solve_lp(p, max_iterations=2)
    assert out.status == LpStatus.ITERATION_LIMIT


@settings(max_examples=150, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_optimal_outcomes_are_feasible(seed):
    p = random_lp(np.random.default_rng(seed))
    out = solve_lp(p)
    if out.status == LpStatus.OPTIMAL:
        check_feasible(p, out.solution)
        assert abs(out.objective_value - p.objective @ out.solution) <= 1e-7 * max(1, abs(out.objective_value))
        assert FEAS_TOL <= 1e-6
