"""Bounded-variable primal simplex for the node LP relaxations.

Solves ``min c.x  s.t.  A x <= b,  l <= x <= u`` with a dense revised
simplex. Slack columns are appended to every row.

Cold start: structurals sit at a finite bound, rows whose slack would start
negative receive an artificial column, and a phase-1 pass drives the
artificials to zero. Warm start (optional, used by branch-and-bound): the
parent's basis is reinstated and a composite phase 1 minimises the sum of
bound violations of the basic variables.

Entering and leaving variables follow Bland's smallest-index rule. The basis
inverse is updated in product form and refactored every ``REFACTOR_EVERY``
pivots.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

FEAS_TOL = 1e-7
PIVOT_TOL = 1e-9
DUAL_TOL = 1e-9
REFACTOR_EVERY = 50
DEFAULT_MAX_ITERATIONS = 50_000


class LpStatus(str, Enum):
    OPTIMAL = "OPTIMAL"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"
    ITERATION_LIMIT = "ITERATION_LIMIT"


class VarStatus(str, Enum):
    BASIC = "BASIC"
    AT_LOWER = "AT_LOWER"
    AT_UPPER = "AT_UPPER"


@dataclass
class LpProblem:
    """LP with rows in ``<=`` form and node-local working bounds."""

    objective: np.ndarray
    A: np.ndarray
    b: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=np.float64)
        n = self.objective.shape[0]
        self.A = np.asarray(self.A, dtype=np.float64).reshape(-1, n)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if self.A.shape[0] != self.b.shape[0]:
            raise ValueError("row count of A and b differ")
        if self.lower.shape != (n,) or self.upper.shape != (n,):
            raise ValueError("bound vectors must match the objective length")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")
        if not np.all(np.isfinite(self.b)):
            raise ValueError("rhs must be finite")


@dataclass
class WarmStart:
    """Basis over structural + slack columns, reusable by a child LP."""

    basis: np.ndarray   # m column indices in [0, n + m)
    status: np.ndarray  # per column: 0 basic, 1 at lower, 2 at upper, 3 free


@dataclass
class LpOutcome:
    status: LpStatus
    objective_value: float
    solution: np.ndarray
    basis: list
    iterations: int
    warm: WarmStart | None = None


_BASIC, _LOWER, _UPPER, _FREE = 0, 1, 2, 3


def _nonbasic_value(lo, up, st):
    if st == _LOWER and np.isfinite(lo):
        return lo, _LOWER
    if st == _UPPER and np.isfinite(up):
        return up, _UPPER
    if np.isfinite(lo):
        return lo, _LOWER
    if np.isfinite(up):
        return up, _UPPER
    return 0.0, _FREE


class _Simplex:
    def __init__(self, p: LpProblem, max_iterations: int, warm: WarmStart | None = None):
        m, n = p.A.shape
        self.m, self.n = m, n
        self.max_iterations = max_iterations
        self.iterations = 0
        self.b = p.b.copy()
        self.pivots_since_refactor = 0

        if warm is not None:
            self.cols = np.hstack([p.A, np.eye(m)])
            self.ncols = self.first_art = n + m
            self.lower = np.concatenate([p.lower, np.zeros(m)])
            self.upper = np.concatenate([p.upper, np.full(m, np.inf)])
            self.basis = warm.basis.copy()
            self.status = warm.status.copy()
            self.x = np.zeros(self.ncols)
            for j in np.flatnonzero(self.status != _BASIC):
                self.x[j], self.status[j] = _nonbasic_value(self.lower[j], self.upper[j], self.status[j])
            self.allow_entering = np.ones(self.ncols, dtype=bool)
            self.refactor()
            return

        x = np.zeros(n)
        status = np.full(n, _LOWER, dtype=np.int8)
        for j in range(n):
            x[j], status[j] = _nonbasic_value(p.lower[j], p.upper[j], _LOWER)
        resid = p.b - p.A @ x if m else np.zeros(0)
        art_rows = np.flatnonzero(resid < -FEAS_TOL)
        k = len(art_rows)

        cols = np.zeros((m, n + m + k))
        cols[:, :n] = p.A
        cols[:, n:n + m] = np.eye(m)
        cols[art_rows, n + m + np.arange(k)] = -1.0
        self.cols = cols
        self.ncols = n + m + k
        self.first_art = n + m
        self.lower = np.concatenate([p.lower, np.zeros(m + k)])
        self.upper = np.concatenate([p.upper, np.full(m + k, np.inf)])
        self.x = np.concatenate([x, np.zeros(m + k)])
        self.status = np.concatenate([status, np.full(m + k, _LOWER, dtype=np.int8)])

        basis = np.arange(n, n + m)
        basis[art_rows] = n + m + np.arange(k)
        self.x[basis] = np.abs(resid) if m else 0.0
        self.basis = basis
        self.status[basis] = _BASIC
        self.binv = np.diag(np.where(basis >= n + m, -1.0, 1.0)) if m else np.zeros((0, 0))
        self.allow_entering = np.ones(self.ncols, dtype=bool)

    def refactor(self):
        if self.m == 0:
            self.binv = np.zeros((0, 0))
            return
        self.binv = np.linalg.inv(self.cols[:, self.basis])
        nonbasic = self.status != _BASIC
        rhs = self.b - self.cols[:, nonbasic] @ self.x[nonbasic]
        self.x[self.basis] = self.binv @ rhs
        self.pivots_since_refactor = 0

    def _infeasibility(self):
        xb = self.x[self.basis]
        lb, ub = self.lower[self.basis], self.upper[self.basis]
        below = xb < lb - FEAS_TOL
        above = xb > ub + FEAS_TOL
        return below, above, float(np.sum((lb - xb)[below]) + np.sum((xb - ub)[above]))

    def iterate(self, cost=None, composite=False) -> LpStatus:
        """Simplex iterations until optimal/unbounded/limit.

        With ``composite=True`` the objective is the sum of basic bound
        violations, recomputed every iteration; stops once it reaches zero.
        """
        m = self.m
        while True:
            if composite:
                below, above, infeas = self._infeasibility()
                if infeas == 0.0:
                    return LpStatus.OPTIMAL
                cb = np.where(below, -1.0, np.where(above, 1.0, 0.0))
                y = cb @ self.binv
                d = -(y @ self.cols)
                d[self.basis] = 0.0
            else:
                y = cost[self.basis] @ self.binv if m else np.zeros(0)
                d = cost - y @ self.cols if m else cost.copy()
            if self.iterations >= self.max_iterations:
                return LpStatus.ITERATION_LIMIT
            st = self.status
            can_up = ((st == _LOWER) | (st == _FREE)) & (self.x < self.upper)
            can_down = ((st == _UPPER) | (st == _FREE)) & (self.x > self.lower)
            eligible = self.allow_entering & (
                (can_up & (d < -DUAL_TOL)) | (can_down & (d > DUAL_TOL)))
            cand = np.flatnonzero(eligible)
            if cand.size == 0:
                return LpStatus.OPTIMAL
            j = int(cand[0])
            direction = 1.0 if d[j] < 0 else -1.0

            w = self.binv @ self.cols[:, j] if m else np.zeros(0)
            rate = -direction * w
            xb = self.x[self.basis]
            lb, ub = self.lower[self.basis], self.upper[self.basis]
            lim = np.full(m, np.inf)
            dec = rate < -PIVOT_TOL
            inc = rate > PIVOT_TOL
            with np.errstate(invalid="ignore"):
                if composite:
                    below = xb < lb - FEAS_TOL
                    above = xb > ub + FEAS_TOL
                    feas = ~(below | above)
                    sel = dec & feas
                    lim[sel] = np.maximum(xb[sel] - lb[sel], 0.0) / -rate[sel]
                    sel = inc & feas
                    lim[sel] = np.maximum(ub[sel] - xb[sel], 0.0) / rate[sel]
                    sel = inc & below
                    lim[sel] = (lb[sel] - xb[sel]) / rate[sel]
                    sel = dec & above
                    lim[sel] = (xb[sel] - ub[sel]) / -rate[sel]
                else:
                    lim[dec] = np.maximum(xb[dec] - lb[dec], 0.0) / -rate[dec]
                    lim[inc] = np.maximum(ub[inc] - xb[inc], 0.0) / rate[inc]
            lim[np.isnan(lim)] = np.inf
            step = self.upper[j] - self.lower[j]
            leave_row = -1
            if m:
                best = lim.min()
                if best < step - 1e-12:
                    ties = np.flatnonzero(lim <= best + 1e-12)
                    leave_row = int(ties[np.argmin(self.basis[ties])])
                    step = best
            if not np.isfinite(step):
                return LpStatus.UNBOUNDED

            self.iterations += 1
            self.x[j] += direction * step
            if m:
                self.x[self.basis] += step * rate
            if leave_row < 0:
                if direction > 0:
                    self.x[j], self.status[j] = self.upper[j], _UPPER
                else:
                    self.x[j], self.status[j] = self.lower[j], _LOWER
                continue

            bv = self.basis[leave_row]
            if rate[leave_row] < 0:
                # moving down: leaves at lower (feasible) or at upper (was above)
                if composite and xb[leave_row] > ub[leave_row] + FEAS_TOL:
                    self.x[bv], self.status[bv] = self.upper[bv], _UPPER
                else:
                    self.x[bv], self.status[bv] = self.lower[bv], _LOWER
            else:
                if composite and xb[leave_row] < lb[leave_row] - FEAS_TOL:
                    self.x[bv], self.status[bv] = self.lower[bv], _LOWER
                else:
                    self.x[bv], self.status[bv] = self.upper[bv], _UPPER
            self.basis[leave_row] = j
            self.status[j] = _BASIC
            self.pivots_since_refactor += 1
            if self.pivots_since_refactor >= REFACTOR_EVERY:
                self.refactor()
            else:
                prow = self.binv[leave_row] / w[leave_row]
                self.binv -= np.outer(w, prow)
                self.binv[leave_row] = prow

    def warm_state(self):
        """Basis over structural + slack columns (artificials swapped for slacks)."""
        nm = self.n + self.m
        basis = self.basis.copy()
        for r in np.flatnonzero(basis >= nm):
            row = int(np.flatnonzero(self.cols[:, basis[r]])[0])
            basis[r] = self.n + row
        status = self.status[:nm].copy()
        status[status == _BASIC] = _LOWER
        status[basis] = _BASIC
        return WarmStart(basis, status)


def solve_lp(p: LpProblem, max_iterations: int = DEFAULT_MAX_ITERATIONS,
             warm: WarmStart | None = None) -> LpOutcome:
    """Solve ``p``. ``warm`` reinstates a previous basis; on any warm-start
    breakdown (singular basis, iteration limit) the solve restarts cold."""
    if warm is not None:
        try:
            out = _solve(p, max_iterations, warm)
        except np.linalg.LinAlgError:
            out = None
        if out is not None and out.status != LpStatus.ITERATION_LIMIT:
            return out
        cold = _solve(p, max_iterations, None)
        if out is not None:
            cold.iterations += out.iterations
        return cold
    return _solve(p, max_iterations, None)


def _solve(p, max_iterations, warm):
    s = _Simplex(p, max_iterations, warm)
    n = s.n

    def outcome(status, value=np.nan):
        sol = s.x[:n].copy()
        basis = [VarStatus.BASIC if st == _BASIC else
                 VarStatus.AT_UPPER if st == _UPPER else VarStatus.AT_LOWER
                 for st in s.status[:n]]
        return LpOutcome(status, value, sol, basis, s.iterations,
                         s.warm_state() if status == LpStatus.OPTIMAL else None)

    if warm is not None:
        st = s.iterate(composite=True)
        if st == LpStatus.ITERATION_LIMIT:
            return outcome(st)
        s.refactor()
        if s._infeasibility()[2] > 0.0:
            return outcome(LpStatus.INFEASIBLE)
    elif s.ncols > s.first_art:
        phase1 = np.zeros(s.ncols)
        phase1[s.first_art:] = 1.0
        st = s.iterate(phase1)
        if st == LpStatus.ITERATION_LIMIT:
            return outcome(st)
        s.refactor()
        if s.x[s.first_art:].sum() > FEAS_TOL:
            return outcome(LpStatus.INFEASIBLE)
        # artificials are pinned at zero for phase 2
        s.upper[s.first_art:] = 0.0
        s.x[s.first_art:] = 0.0
        s.allow_entering[s.first_art:] = False

    cost = np.concatenate([p.objective, np.zeros(s.ncols - n)])
    st = s.iterate(cost)
    if st != LpStatus.OPTIMAL:
        return outcome(st)
    s.refactor()
    basic = s.basis
    s.x[basic] = np.clip(s.x[basic], s.lower[basic], s.upper[basic])
    x = s.x[:n]
    return outcome(LpStatus.OPTIMAL, float(p.objective @ x))
