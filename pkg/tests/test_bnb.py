import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from conftest import small_binary
from tgppo.bnb import (BranchAndBound, ChildSide, NodeRecord, NodeStatus, PseudocostTable, RunConfig, RunStats, RunStatus,
                       accumulate_pdi, compute_gap, run)
from tgppo.errors import PolicyRangeError
from tgppo.milp import Family, GeneratorParams, brute_force_solve, generate_instance, validate_instance
from tgppo.policies import (BASELINES, MostFractionalPolicy, PscostPolicy, StrongPolicy, baseline_policies,
                            make_policy)


def test_knapsack_trace_with_cutoff(knapsack):
    st_ = run(knapsack, MostFractionalPolicy(), RunConfig(cutoff=-4.0))
    assert st_.status == RunStatus.OPTIMAL
    assert st_.nodes_explored == 5
    assert st_.decisions == 2


def test_knapsack_node_bounds(knapsack):
    s = BranchAndBound(knapsack, RunConfig(cutoff=-4.0))
    assert s.start()
    assert math.isclose(s.current.lp_bound, -17 / 3, abs_tol=1e-9)
    assert s.candidates == [1]
    s.branch(0)
    left, right = s.nodes[1], s.nodes[2]
    assert math.isclose(left.lp_bound, -3.0, abs_tol=1e-9)
    assert math.isclose(right.lp_bound, -5.5, abs_tol=1e-9)
    assert left.status == NodeStatus.PRUNED_BOUND


def test_integral_root_needs_no_decision():
    inst = small_binary("easy", [1, 1], [[1, 1]], [1], senses=["G"])
    st_ = run(inst, MostFractionalPolicy())
    assert st_.status == RunStatus.OPTIMAL
    assert (st_.nodes_explored, st_.decisions) == (1, 0)
    assert st_.primal_bound == 1.0


def test_node_budget_of_one(knapsack):
    st_ = run(knapsack, MostFractionalPolicy(), RunConfig(cutoff=-4.0, node_budget=1))
    assert st_.status == RunStatus.TIMELIMIT
    assert st_.nodes_explored == 1


def test_infeasible_instance():
    inst = small_binary("inf", [1, 1], [[2, 2]], [3], senses=["E"])
    assert run(inst, MostFractionalPolicy()).status == RunStatus.INFEASIBLE


def test_compute_gap_examples():
    assert compute_gap(-4, -4) == 0.0
    assert compute_gap(-4, -8) == 0.5
    assert compute_gap(-4, -math.inf) == 1.0
    assert compute_gap(math.inf, 3.0) == 1.0


def test_accumulate_pdi_examples():
    s = RunStats()
    for _ in range(10):
        accumulate_pdi(s, 0.0, 1.0)
    assert s.pdi == 0.0
    assert accumulate_pdi(RunStats(), 0.5, 10.0).pdi == 5.0
    s = RunStats()
    accumulate_pdi(s, 1.0, 2.0)
    accumulate_pdi(s, 0.25, 4.0)
    assert s.pdi == 3.0
    with pytest.raises(ValueError):
        accumulate_pdi(RunStats(), 0.1, -1.0)


def _solver_with_fracs(fracs):
    """A solver paused at a root whose candidates have the given fractions."""
    n = len(fracs)
    inst = small_binary("f", np.ones(n), np.eye(n), np.ones(n))
    s = BranchAndBound(inst)
    node = NodeRecord(0, None, 0, [], np.zeros(n), np.ones(n), ChildSide.ROOT, lp_bound=0.0,
                      lp_solution=np.asarray(fracs, dtype=float))
    s.nodes = [node]
    s.current = node
    s.candidates = list(range(n))
    return s


def test_most_fractional_choice():
    assert MostFractionalPolicy().decide(None, _solver_with_fracs([0.5, 0.1])) == 0
    assert MostFractionalPolicy().decide(None, _solver_with_fracs([0.1, 0.6])) == 1


def test_pscost_with_equal_costs_is_most_fractional():
    s = _solver_with_fracs([0.3, 0.5, 0.5, 0.8])
    assert PscostPolicy().decide(None, s) == 1


def test_strong_on_knapsack_root(knapsack):
    s = BranchAndBound(knapsack)
    s.start()
    assert s.candidates == [1]
    down, up = s.strong_branch(1)
    assert math.isclose(down, -3.0, abs_tol=1e-9) and math.isclose(up, -5.5, abs_tol=1e-9)
    assert StrongPolicy().decide(None, s) == 0


def _lp_bound(inst, lower, upper):
    A, b = inst.dense, inst.rhs
    res = linprog(inst.objective, A_ub=A, b_ub=b, bounds=list(zip(lower, upper)), method="highs")
    return res.fun if res.status == 0 else math.inf


def test_strong_choice_matches_child_lp_oracle():
    checked = 0
    for seed in range(40):
        inst = generate_instance(GeneratorParams(Family.MULTI_KNAPSACK, 3, 8, 0.7, (1, 20), seed))
        v = validate_instance(inst)
        s = BranchAndBound(inst)
        if not s.start() or len(s.candidates) < 2:
            continue
        root = s.current
        scores = []
        for var in s.candidates:
            x = root.lp_solution[var]
            up_lo, dn_up = root.lower.copy(), root.upper.copy()
            dn_up[var] = math.floor(x)
            up_lo[var] = math.ceil(x)
            gains = []
            for lo, up in ((root.lower, dn_up), (up_lo, root.upper)):
                val = _lp_bound(v, lo, up)
                gains.append(1e6 if math.isinf(val) else max(val - root.lp_bound, 0.0))
            scores.append(max(gains[0], 1e-6) * max(gains[1], 1e-6))
        scores = np.array(scores)
        best = np.flatnonzero(scores >= scores.max() * (1 - 1e-7))
        assert StrongPolicy().decide(None, s) in best
        checked += 1
    assert checked >= 10


def test_fresh_pseudocost_table_falls_back_to_one():
    pc = PseudocostTable(3)
    np.testing.assert_array_equal(pc.up_means(), [1.0, 1.0, 1.0])
    pc.update(0, "up", 4.0)
    pc.update(1, "up", 2.0)
    np.testing.assert_array_equal(pc.up_means(), [4.0, 2.0, 3.0])


def test_policy_registry():
    assert set(baseline_policies()) == {"random", "most_fractional", "pscost", "strong", "relpscost"}
    with pytest.raises(ValueError):
        make_policy("nope")


def test_out_of_range_action_rejected(knapsack):
    class Bad(MostFractionalPolicy):
        def decide(self, state, ctx):
            return 7

    with pytest.raises(PolicyRangeError):
        run(knapsack, Bad())


def test_event_log_lines(knapsack):
    buf = io.StringIO()
    run(knapsack, MostFractionalPolicy(), RunConfig(cutoff=-4.0), event_log=buf)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 2 and lines[0].startswith("decision 1 node 0")


def _small_instances(count, seed0=0):
    out = []
    for k in range(count):
        fam = list(Family)[k % 3]
        rows = 2 + k % 3
        cols = 4 + k % 8
        out.append(generate_instance(GeneratorParams(fam, rows, cols, 0.6, (1, 9), seed0 + k)))
    return out


@pytest.mark.parametrize("name", sorted(BASELINES))
def test_every_policy_finds_the_optimum(name):
    for inst in _small_instances(15, seed0=100):
        ref = brute_force_solve(inst, enum_limit=1 << 20)
        st_ = run(inst, make_policy(name), RunConfig(seed=1))
        assert st_.status.value == ref.status
        if ref.status == "OPTIMAL":
            assert abs(st_.primal_bound - ref.value) <= 1e-6
            assert abs(st_.dual_bound - ref.value) <= 1e-6


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), name=st.sampled_from(sorted(BASELINES)))
def test_run_invariants(seed, name):
    inst = _small_instances(1, seed)[0]
    events = []
    st_ = run(inst, make_policy(name), RunConfig(seed=seed), on_decision=lambda s, a, c: events.append(c))
    assert st_.decisions == len(events)
    assert st_.nodes_explored >= 1 + st_.decisions
    assert st_.pdi >= 0
    clocks = [c for c, _ in st_.gap_timeline]
    assert clocks == sorted(clocks)
    assert all(0.0 <= g <= 1.0 for _, g in st_.gap_timeline)
    if st_.status == RunStatus.OPTIMAL:
        assert st_.gap_timeline[-1][1] == 0.0
        assert st_.dual_bound <= st_.primal_bound + 1e-9


def test_runs_are_seed_deterministic():
    inst = _small_instances(1, 7)[0]
    a = run(inst, make_policy("random"), RunConfig(seed=4))
    b = run(inst, make_policy("random"), RunConfig(seed=4))
    assert (a.nodes_explored, a.pdi, a.gap_timeline) == (b.nodes_explored, b.pdi, b.gap_timeline)
