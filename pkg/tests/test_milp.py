import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import DATA, small_binary
from tgppo.errors import GeneratorError, InvalidInstanceError, LimitExceeded, MpsError
from tgppo.milp import (Family, GeneratorParams, MilpInstance, brute_force_solve, dumps, generate_instance,
                        loads, parse_mps, permute_columns, read_instance, validate_instance, write_instance,
                        write_mps)
from tgppo.simplex import LpProblem, solve_lp

TWO_VAR_MPS = """NAME tiny
ROWS
 N obj
 L c1
COLUMNS
 MARKER 'MARKER' 'INTORG'
 x obj 1 c1 1
 y obj 1 c1 1
 MARKER 'MARKER' 'INTEND'
RHS
 rhs c1 1
ENDATA
"""


def same_instance(a, b):
    assert a.name == b.name and a.senses == b.senses
    for f in ("objective", "row_idx", "col_idx", "values", "rhs", "lower", "upper", "is_integer"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_intorg_defaults_to_binary():
    inst = parse_mps(TWO_VAR_MPS)
    assert inst.num_vars == 2
    assert inst.is_integer.tolist() == [True, True]
    assert inst.upper.tolist() == [1.0, 1.0]


def test_ranges_section_rejected():
    text = TWO_VAR_MPS.replace("ENDATA", "RANGES\n rng c1 2\nENDATA")
    with pytest.raises(MpsError) as e:
        parse_mps(text)
    assert e.value.code == "UNSUPPORTED_SECTION"
    assert "RANGES" in str(e.value)


def test_duplicate_coefficient_rejected():
    text = TWO_VAR_MPS.replace(" y obj 1 c1 1", " y obj 1 c1 1\n y c1 2")
    with pytest.raises(MpsError) as e:
        parse_mps(text)
    assert e.value.code == "DUPLICATE_ENTRY"


def test_set_cover_fixture_optimum(set_cover_fixture):
    inst = set_cover_fixture
    assert inst.num_vars == 4 and inst.num_cons == 3
    assert set(inst.senses) == {"G"}
    res = brute_force_solve(inst)
    assert res.status == "OPTIMAL" and res.value == 1.0
    assert res.solution.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_knapsack_fixture_optimum(knapsack):
    res = brute_force_solve(knapsack)
    assert res.value == -4.0
    assert res.solution.tolist() == [0.0, 1.0]


def test_generator_is_deterministic():
    p = GeneratorParams(Family.SET_COVER, rows=3, cols=4, seed=7)
    assert dumps(generate_instance(p)) == dumps(generate_instance(p))


def test_generator_rejects_sparse_cover():
    with pytest.raises(GeneratorError) as e:
        generate_instance(GeneratorParams(Family.SET_COVER, rows=2, cols=50, density=0.01))
    assert e.value.code == "INFEASIBLE_PARAMS"


def test_two_item_knapsack_oracle():
    inst = small_binary("k", [-3, -4], [[2, 3]], [4])
    res = brute_force_solve(inst)
    assert res.value == -4.0 and res.solution.tolist() == [0.0, 1.0]


def test_ge_row_is_negated():
    inst = small_binary("g", [1, 1], [[1, 2]], [1], senses=["G"])
    v = validate_instance(inst)
    assert v.senses == ("L",)
    np.testing.assert_array_equal(v.dense, [[-1.0, -2.0]])
    np.testing.assert_array_equal(v.rhs, [-1.0])


def test_eq_row_is_split():
    inst = small_binary("e", [1, 1], [[1, 2]], [1], senses=["E"])
    v = validate_instance(inst)
    np.testing.assert_array_equal(v.dense, [[1.0, 2.0], [-1.0, -2.0]])
    np.testing.assert_array_equal(v.rhs, [1.0, -1.0])


def test_crossing_bounds_reported():
    inst = MilpInstance.from_dense("x", [1.0], [[1.0]], ["L"], [1.0], [2.0], [1.0], [False])
    with pytest.raises(InvalidInstanceError) as e:
        validate_instance(inst)
    assert ("CROSSING_BOUNDS", 0) in e.value.errors


def test_empty_integer_feasible_set():
    # x1 + x2 >= 3 with binaries has no solution
    inst = small_binary("inf", [1, 1], [[1, 1]], [3], senses=["G"])
    assert brute_force_solve(inst).status == "INFEASIBLE"


def test_pure_lp_matches_simplex():
    inst = MilpInstance.from_dense("lp", [-1.0, -2.0], [[1.0, 1.0]], ["L"], [1.5], [0, 0], [1, 1],
                                   [False, False])
    res = brute_force_solve(inst)
    lp = solve_lp(LpProblem(inst.objective, inst.dense, inst.rhs, inst.lower, inst.upper))
    assert res.status == "OPTIMAL"
    assert math.isclose(res.value, lp.objective_value, abs_tol=1e-9)
    assert math.isclose(res.value, -2.5, abs_tol=1e-9)


def test_enumeration_limit():
    inst = generate_instance(GeneratorParams(Family.SET_COVER, 5, 20, 0.3, (1, 5), seed=1))
    with pytest.raises(LimitExceeded):
        brute_force_solve(inst, enum_limit=1000)


def test_file_round_trip(tmp_path):
    inst = generate_instance(GeneratorParams(Family.MIXED_RANDOM, 4, 6, 0.5, (1, 9), seed=3))
    for suffix in (".mps", ".inst"):
        path = tmp_path / f"a{suffix}"
        write_instance(inst, path)
        same_instance(read_instance(path), inst)


def test_permute_columns_keeps_optimum():
    inst = generate_instance(GeneratorParams(Family.MULTI_KNAPSACK, 2, 8, 0.6, (1, 9), seed=4))
    perm = permute_columns(inst, seed=11)
    assert brute_force_solve(perm).value == brute_force_solve(inst).value


@settings(max_examples=60, deadline=None)
@given(family=st.sampled_from(list(Family)), rows=st.integers(1, 6), cols=st.integers(1, 8),
       seed=st.integers(0, 10_000))
def test_serialization_round_trips(family, rows, cols, seed):
    try:
        inst = generate_instance(GeneratorParams(family, rows, cols, 0.9, (1, 9), seed))
    except GeneratorError:
        return
    same_instance(loads(dumps(inst)), inst)
    same_instance(parse_mps(write_mps(inst)), inst)
    assert dumps(loads(dumps(inst))) == dumps(inst)


def test_bundled_fixtures_exist():
    assert (DATA / "knapsack2.mps").exists() and (DATA / "sc3x4.mps").exists()
