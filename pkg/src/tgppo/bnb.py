"""Best-bound branch-and-bound with a pluggable branching policy.

The solver is step-driven so that a learning agent can sit in the loop:
``start()`` solves the root and advances to the first decision,
``branch(k)`` branches on candidate ``k`` and advances to the next one.
``run()`` wraps this loop for a ``BranchingPolicy``.

Children are solved as soon as they are created, so "nodes explored" counts
every LP-solved tree node, including those pruned right after their solve.
With a cutoff (the "expert" setting), the primal bound is pinned at the
cutoff and no incumbents are tracked.
"""

import heapq
import math
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import LpIterationLimit, PolicyRangeError
from .milp import MilpInstance, validate_instance
from .simplex import DEFAULT_MAX_ITERATIONS, LpProblem, LpStatus, VarStatus, WarmStart, solve_lp

PRUNE_TOL = 1e-9
RELIABILITY = 8


class NodeStatus(str, Enum):
    OPEN = "OPEN"
    BRANCHED = "BRANCHED"
    PRUNED_BOUND = "PRUNED_BOUND"
    PRUNED_INFEASIBLE = "PRUNED_INFEASIBLE"
    FATHOMED_INTEGRAL = "FATHOMED_INTEGRAL"


class ChildSide(str, Enum):
    LEFT = "LEFT"
    RIGHT = "RIGHT"
    ROOT = "ROOT"


class RunStatus(str, Enum):
    OPTIMAL = "OPTIMAL"
    TIMELIMIT = "TIMELIMIT"
    INFEASIBLE = "INFEASIBLE"
    UNBOUNDED = "UNBOUNDED"


@dataclass
class NodeRecord:
    id: int
    parent_id: int | None
    depth: int
    bound_changes: list
    lower: np.ndarray
    upper: np.ndarray
    child_side: ChildSide
    lp_bound: float = -math.inf
    lp_solution: np.ndarray | None = None
    basis: list | None = None
    warm: WarmStart | None = None
    status: NodeStatus = NodeStatus.OPEN
    lp_iterations: int = 0


@dataclass
class RunStats:
    nodes_explored: int = 0
    status: RunStatus | None = None
    gap_timeline: list = field(default_factory=list)
    pdi: float = 0.0
    decisions: int = 0
    clock: float = 0.0
    primal_bound: float = math.inf
    dual_bound: float = -math.inf
    best_solution: np.ndarray | None = None
    lp_iterations: int = 0
    max_depth: int = 0


@dataclass
class RunConfig:
    cutoff: float | None = None
    node_budget: int | None = None
    decision_budget: int | None = None
    time_budget: float | None = None
    integrality_tol: float = 1e-6
    seed: int = 0
    clock: str = "decisions"  # or "wall"
    max_lp_iterations: int = DEFAULT_MAX_ITERATIONS
    pdi_reference: float = 0.0  # baseline PDI used by the progress features

    def effective_decision_budget(self):
        if self.decision_budget:
            return self.decision_budget
        if self.node_budget:
            return max(1, self.node_budget // 2)
        return 10_000


class PseudocostTable:
    """Per-variable running sums of per-unit objective gains."""

    def __init__(self, n):
        self.up_sum = np.zeros(n)
        self.up_count = np.zeros(n, dtype=np.int64)
        self.down_sum = np.zeros(n)
        self.down_count = np.zeros(n, dtype=np.int64)

    def update(self, var, side, gain_per_unit):
        if side == "up":
            self.up_sum[var] += gain_per_unit
            self.up_count[var] += 1
        else:
            self.down_sum[var] += gain_per_unit
            self.down_count[var] += 1

    @staticmethod
    def _means(sums, counts):
        init = counts > 0
        glob = float(np.mean(sums[init] / counts[init])) if init.any() else 1.0
        out = np.full(sums.shape, glob)
        out[init] = sums[init] / counts[init]
        return out, glob

    def up_means(self):
        """Per-variable mean up gain, falling back to the global mean, then 1."""
        return self._means(self.up_sum, self.up_count)[0]

    def down_means(self):
        return self._means(self.down_sum, self.down_count)[0]

    def global_up_mean(self):
        return self._means(self.up_sum, self.up_count)[1]

    def global_down_mean(self):
        return self._means(self.down_sum, self.down_count)[1]

    def product_scores(self, vars_, fracs, eps=1e-6):
        up = self.up_means()[vars_]
        down = self.down_means()[vars_]
        return np.maximum(down * fracs, eps) * np.maximum(up * (1 - fracs), eps)


def compute_gap(primal: float, dual: float) -> float:
    if not (math.isfinite(primal) and math.isfinite(dual)):
        return 1.0
    return min(1.0, abs(primal - dual) / max(abs(primal), abs(dual), 1e-10))


def accumulate_pdi(stats: RunStats, gap: float, dt: float) -> RunStats:
    """Left-rectangle update ``pdi += gap * dt``."""
    if dt < 0:
        raise ValueError("negative clock delta")
    stats.pdi += gap * dt
    return stats


def _pdi_of_timeline(timeline):
    total = 0.0
    for (c0, g0), (c1, _) in zip(timeline, timeline[1:]):
        total += g0 * (c1 - c0)
    return total


@dataclass
class BranchRecord:
    depth: int
    var: int
    down_gain: float
    up_gain: float
    both_fathomed: bool


class BranchAndBound:
    def __init__(self, inst: MilpInstance, cfg: RunConfig | None = None, event_log=None):
        self.cfg = cfg or RunConfig()
        self.inst = validate_instance(inst)
        self.A = self.inst.dense
        self.b = self.inst.rhs
        self.c = self.inst.objective
        self.n = self.inst.num_vars
        self.int_vars = np.flatnonzero(self.inst.is_integer)
        self.rng = np.random.default_rng(self.cfg.seed)
        self.pseudocosts = PseudocostTable(self.n)
        self.event_log = event_log
        self.stats = RunStats()
        self.nodes: list[NodeRecord] = []
        self._heap = []
        self.current: NodeRecord | None = None
        self.candidates: list[int] = []
        self.incumbent = math.inf
        self.root_bound = -math.inf
        self.finished = False
        self._t0 = None

        # history used by the featurizer
        self.branch_history: list[BranchRecord] = []
        self.branch_var_counts = np.zeros(self.n, dtype=np.int64)
        self.realized_gains: list[float] = []
        self.child_lps = 0
        self.child_infeasible = 0
        self.child_bound_change_sum = 0.0
        self.lp_limit_hits = 0
        self.node_lps = 0
        self.count_pruned_bound = 0
        self.count_infeasible = 0
        self.count_integral = 0
        self.last_selected_bound = None
        self.plunge_depth = 0
        self._last_branched_id = None
        self.strong_lps = 0

    # ----------------------------------------------------------- bookkeeping
    @property
    def primal_bound(self):
        return self.cfg.cutoff if self.cfg.cutoff is not None else self.incumbent

    def _prune_level(self):
        p = self.primal_bound
        return p - PRUNE_TOL * max(1.0, abs(p)) if math.isfinite(p) else math.inf

    def _open_nodes(self):
        lvl = self._prune_level()
        return [self.nodes[i] for _, i in self._heap if self.nodes[i].lp_bound < lvl]

    def frontier(self):
        """Open nodes plus the node awaiting a decision."""
        nodes = self._open_nodes()
        if self.current is not None and not self.finished:
            nodes.append(self.current)
        return nodes

    def dual_bound(self):
        front = self.frontier()
        if front:
            return min(nd.lp_bound for nd in front)
        return self.primal_bound if math.isfinite(self.primal_bound) else math.inf

    def gap(self):
        return compute_gap(self.primal_bound, self.dual_bound())

    def elapsed(self):
        return 0.0 if self._t0 is None else time.perf_counter() - self._t0

    def current_clock(self):
        if self.cfg.clock == "wall":
            return self.elapsed()
        return float(self.stats.decisions)

    def budget_fraction(self):
        """Normalised clock tau in [0, 1]."""
        if self.cfg.clock == "wall" and self.cfg.time_budget:
            return min(1.0, self.elapsed() / self.cfg.time_budget)
        return min(1.0, self.stats.decisions / self.cfg.effective_decision_budget())

    def _record_gap(self):
        clock = self.current_clock()
        g = self.gap()
        tl = self.stats.gap_timeline
        if tl:
            c0, g0 = tl[-1]
            accumulate_pdi(self.stats, g0, max(0.0, clock - c0))
        tl.append((clock, g))
        self.stats.clock = clock

    def _budget_hit(self):
        cfg = self.cfg
        if cfg.node_budget is not None and self.stats.nodes_explored >= cfg.node_budget:
            return True
        if cfg.decision_budget is not None and self.stats.decisions >= cfg.decision_budget:
            return True
        if cfg.time_budget is not None and self.elapsed() >= cfg.time_budget:
            return True
        return False

    # ----------------------------------------------------------------- LPs
    def _solve(self, lower, upper, warm=None):
        out = solve_lp(LpProblem(self.c, self.A, self.b, lower, upper),
                       max_iterations=self.cfg.max_lp_iterations, warm=warm)
        if out.status == LpStatus.ITERATION_LIMIT:
            self.lp_limit_hits += 1
            raise LpIterationLimit(f"node LP exceeded {self.cfg.max_lp_iterations} iterations")
        return out

    def fractional_vars(self, x):
        xi = x[self.int_vars]
        frac = np.abs(xi - np.round(xi)) > self.cfg.integrality_tol
        return self.int_vars[frac]

    def _evaluate(self, node: NodeRecord, warm=None):
        out = self._solve(node.lower, node.upper, warm)
        self.stats.nodes_explored += 1
        self.node_lps += 1
        self.stats.lp_iterations += out.iterations
        node.lp_iterations = out.iterations
        self.stats.max_depth = max(self.stats.max_depth, node.depth)
        if out.status == LpStatus.INFEASIBLE:
            node.status = NodeStatus.PRUNED_INFEASIBLE
            self.count_infeasible += 1
            return out
        if out.status == LpStatus.UNBOUNDED:
            node.lp_bound = -math.inf
            return out
        node.lp_bound = out.objective_value
        if node.lp_bound >= self._prune_level():
            node.status = NodeStatus.PRUNED_BOUND
            self.count_pruned_bound += 1
            return out
        if len(self.fractional_vars(out.solution)) == 0:
            node.status = NodeStatus.FATHOMED_INTEGRAL
            self.count_integral += 1
            if node.lp_bound < self.incumbent:
                self.incumbent = node.lp_bound
                self.stats.best_solution = out.solution.copy()
            return out
        node.lp_solution = out.solution
        node.basis = out.basis
        node.warm = out.warm
        node.status = NodeStatus.OPEN
        heapq.heappush(self._heap, (node.lp_bound, node.id))
        return out

    # --------------------------------------------------------------- driver
    def start(self) -> bool:
        """Solve the root; return True when a branching decision is pending."""
        self._t0 = time.perf_counter()
        root = NodeRecord(0, None, 0, [], self.inst.lower.copy(), self.inst.upper.copy(),
                          ChildSide.ROOT)
        self.nodes.append(root)
        out = self._evaluate(root)
        if out.status == LpStatus.INFEASIBLE:
            return self._finish(RunStatus.INFEASIBLE)
        if out.status == LpStatus.UNBOUNDED:
            return self._finish(RunStatus.UNBOUNDED)
        self.root_bound = root.lp_bound
        self._record_gap()
        return self._advance()

    def _advance(self) -> bool:
        self.current = None
        self.candidates = []
        lvl = self._prune_level()
        while self._heap:
            bound, nid = self._heap[0]
            node = self.nodes[nid]
            if bound >= lvl:
                heapq.heappop(self._heap)
                node.status = NodeStatus.PRUNED_BOUND
                node.lp_solution = None
                node.warm = None
                self.count_pruned_bound += 1
                continue
            if self._budget_hit():
                return self._finish(RunStatus.TIMELIMIT)
            heapq.heappop(self._heap)
            self.current = node
            self.candidates = [int(v) for v in self.fractional_vars(node.lp_solution)]
            if node.parent_id is not None and node.parent_id == self._last_branched_id:
                self.plunge_depth += 1
            else:
                self.plunge_depth = 0
            self.last_selected_bound = node.lp_bound
            return True
        if self.cfg.cutoff is None and not math.isfinite(self.incumbent):
            return self._finish(RunStatus.INFEASIBLE)
        return self._finish(RunStatus.OPTIMAL)

    def _finish(self, status: RunStatus) -> bool:
        self.finished = True
        self.stats.status = status
        self.stats.primal_bound = self.primal_bound
        if status == RunStatus.OPTIMAL:
            self.stats.dual_bound = self.primal_bound
        elif status == RunStatus.TIMELIMIT:
            front = self.frontier()
            self.stats.dual_bound = min(nd.lp_bound for nd in front) if front else self.primal_bound
        elif status == RunStatus.UNBOUNDED:
            self.stats.dual_bound = -math.inf
        if self.current is not None:
            self.current.lp_solution = None
        self.current = None
        if self.stats.gap_timeline:
            # close the last interval of the gap integral
            end = self.current_clock() + (1.0 if self.cfg.clock != "wall" else 0.0)
            c0, g0 = self.stats.gap_timeline[-1]
            if status == RunStatus.OPTIMAL:
                g_end = 0.0
            elif status == RunStatus.TIMELIMIT:
                g_end = compute_gap(self.primal_bound, self.stats.dual_bound)
            else:
                g_end = g0
            accumulate_pdi(self.stats, g0, max(0.0, end - c0))
            self.stats.gap_timeline.append((end, g_end))
            self.stats.clock = end
        return False

    def strong_branch(self, var, update_pseudocosts=False):
        """Solve both child LPs of ``var`` at the current node.

        Returns (down_bound, up_bound); an infeasible child gives +inf.
        """
        node = self.current
        x = node.lp_solution[var]
        f = x - math.floor(x)
        bounds = []
        for side in ("down", "up"):
            lo, up = node.lower.copy(), node.upper.copy()
            if side == "down":
                up[var] = math.floor(x)
            else:
                lo[var] = math.ceil(x)
            out = self._solve(lo, up, node.warm)
            self.strong_lps += 1
            val = out.objective_value if out.status == LpStatus.OPTIMAL else math.inf
            bounds.append(val)
            if update_pseudocosts and math.isfinite(val):
                unit = f if side == "down" else 1 - f
                self.pseudocosts.update(var, side, max(val - node.lp_bound, 0.0) / max(unit, 1e-6))
        return tuple(bounds)

    def branch(self, k: int) -> bool:
        """Branch on candidate ``k``; return True when another decision is pending."""
        node = self.current
        if node is None or self.finished:
            raise RuntimeError("no pending branching decision")
        if not (0 <= k < len(self.candidates)):
            raise PolicyRangeError(f"index {k} outside {len(self.candidates)} candidates")
        var = self.candidates[k]
        x = node.lp_solution[var]
        f = x - math.floor(x)
        gains, fathomed = {}, []
        for side, cs in (("down", ChildSide.LEFT), ("up", ChildSide.RIGHT)):
            lo, up = node.lower.copy(), node.upper.copy()
            if side == "down":
                up[var] = math.floor(x)
                change = (var, "UB", up[var])
            else:
                lo[var] = math.ceil(x)
                change = (var, "LB", lo[var])
            child = NodeRecord(len(self.nodes), node.id, node.depth + 1, [change], lo, up, cs)
            self.nodes.append(child)
            out = self._evaluate(child, node.warm)
            self.child_lps += 1
            if out.status == LpStatus.INFEASIBLE:
                self.child_infeasible += 1
                gains[side] = math.inf
            else:
                g = max(child.lp_bound - node.lp_bound, 0.0)
                gains[side] = g
                self.child_bound_change_sum += g
                self.realized_gains.append(g)
                unit = f if side == "down" else 1 - f
                self.pseudocosts.update(var, side, g / max(unit, 1e-6))
            fathomed.append(child.status != NodeStatus.OPEN)
        node.status = NodeStatus.BRANCHED
        node.lp_solution = None
        node.warm = None
        self.branch_history.append(BranchRecord(node.depth, var, gains["down"], gains["up"], all(fathomed)))
        self.branch_var_counts[var] += 1
        self._last_branched_id = node.id
        self.stats.decisions += 1
        if self.event_log is not None:
            self.event_log.write(
                f"decision {self.stats.decisions} node {node.id} depth {node.depth} "
                f"ncands {len(self.candidates)} action {k} clock {self.current_clock():.17g}\n")
        self.current = None
        self._record_gap()
        return self._advance()

    # ------------------------------------------------------------ features
    def path_branch_counts(self, node: NodeRecord):
        counts = {}
        nd = node
        while nd.parent_id is not None:
            for var, _, _ in nd.bound_changes:
                counts[var] = counts.get(var, 0) + 1
            nd = self.nodes[nd.parent_id]
        return counts

    def state(self, pad_to=None):
        from .features import extract_state
        return extract_state(self, pad_to=pad_to)


class BranchingPolicy:
    """Chooses a candidate index at each branching decision.

    ``decide`` receives the feature state (``None`` when ``uses_features`` is
    False) and the live solver, and returns an index into
    ``solver.candidates``.
    """

    name = "policy"
    uses_features = False

    def decide(self, state, ctx) -> int:
        raise NotImplementedError

    def observe(self, outcome) -> None:
        pass


def run(inst: MilpInstance, policy: BranchingPolicy, cfg: RunConfig | None = None,
        on_decision=None, event_log=None) -> RunStats:
    """Solve ``inst`` branching with ``policy``; returns the run statistics.

    ``on_decision(state, action, clock)`` is called after every decision.
    """
    solver = BranchAndBound(inst, cfg, event_log=event_log)
    pending = solver.start()
    while pending:
        state = solver.state() if policy.uses_features else None
        k = int(policy.decide(state, solver))
        if not (0 <= k < len(solver.candidates)):
            raise PolicyRangeError(f"{policy.name} returned {k} for {len(solver.candidates)} candidates")
        if on_decision is not None:
            on_decision(state, k, solver.current_clock())
        pending = solver.branch(k)
    policy.observe(solver.stats)
    return solver.stats
