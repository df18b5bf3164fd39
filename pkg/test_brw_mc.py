"""Lattice sets and the Monte Carlo hitting and escape estimators."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from brw_mc import (LatticeSet, RemainderPolicy, depth_limited_hit_probability, escape_probability,
                    hit_probability, p_infinite)
from exceptions import BracketInfeasibleError, ValidationError
from lattice import make_step_law
from offspring import TreeBudget, make_offspring

E1 = [1, 0, 0, 0, 0]


@pytest.fixture(scope="module")
def step():
    return make_step_law("simple", 5)


@pytest.fixture(scope="module")
def binary():
    return make_offspring("binary_critical")


@pytest.fixture(scope="module")
def origin():
    return LatticeSet.parse("point:0", 5)


def small_policy() -> RemainderPolicy:
    return RemainderPolicy(r_stop=4.0, max_radius=4.0, adaptive=False)


# ---------------------------------------------------------------- sets

def test_parse_specs():
    assert LatticeSet.parse("point:0", 5).points.tolist() == [[0, 0, 0, 0, 0]]
    assert LatticeSet.parse("point:2", 3).points.tolist() == [[2, 0, 0]]
    assert LatticeSet.parse("point:1,0,-1", 3).points.tolist() == [[1, 0, -1]]
    assert len(LatticeSet.parse("ball:1", 5)) == 11


@pytest.mark.parametrize("spec", ["cube:2", "point:1,2", "points:/no/such/file.csv"])
def test_bad_specs(spec):
    with pytest.raises(ValidationError):
        LatticeSet.parse(spec, 3)


def test_points_file(tmp_path):
    path = tmp_path / "pair.csv"
    path.write_text("# two points\n0,0,0\n1,0,0\n", encoding="utf-8")
    K = LatticeSet.parse(f"points:{path}", 3)
    assert len(K) == 2
    assert K.name == "pair"


def test_membership_index():
    K = LatticeSet([[0, 0], [2, 1], [2, 1], [-1, 3]])
    assert len(K) == 3
    idx = K.index([[2, 1], [5, 5], [-1, 3], [0, 1]])
    assert idx[1] == -1 and idx[3] == -1
    np.testing.assert_array_equal(K.points[idx[[0, 2]]], [[2, 1], [-1, 3]])
    assert K.union([7, 7]).contains([7, 7])[0]


def test_empty_set_rejected():
    with pytest.raises(ValidationError):
        LatticeSet(np.zeros((0, 3)))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(-5, 5), min_size=3, max_size=3), min_size=1, max_size=8),
       st.lists(st.integers(-50, 50), min_size=3, max_size=3))
def test_spread_is_translation_invariant(points, shift):
    K = LatticeSet(points)
    moved = K.translate(shift)
    assert moved.spread == pytest.approx(K.spread, abs=1e-9)
    assert np.all(moved.contains(np.asarray(K.points) + np.asarray(shift)))


# ---------------------------------------------------------------- exact oracle

@pytest.mark.parametrize("kind, expected", [("critical", 0.095), ("adjoint", 0.05)])
def test_one_generation_oracle(kind, expected, origin, binary, step):
    assert depth_limited_hit_probability(kind, origin, E1, binary, step, 1) == pytest.approx(expected, rel=1e-12)


def test_oracle_is_monotone_in_depth(origin, binary, step):
    values = [depth_limited_hit_probability("critical", origin, E1, binary, step, n) for n in (1, 2, 3)]
    assert values[0] < values[1] < values[2] < 1.0


@pytest.mark.parametrize("kind", ["critical", "adjoint"])
def test_truncated_simulation_matches_oracle(kind, origin, binary, step):
    exact = depth_limited_hit_probability(kind, origin, E1, binary, step, 2)
    est = hit_probability(kind, origin, E1, binary, step, 40_000, TreeBudget(10_000), seed=3,
                          max_generations=2)
    assert est.capped == 0
    assert abs(est.estimate - exact) < 2.0 * est.half_width


# ---------------------------------------------------------------- hitting

def test_point_inside_K_hits_with_probability_one(origin, binary, step):
    est = hit_probability("critical", origin, [0] * 5, binary, step, 10, TreeBudget(100), seed=0)
    assert est.estimate == 1.0 and est.half_width == 0.0


def test_hit_estimate_is_worker_invariant(origin, binary, step):
    kwargs = dict(budget=TreeBudget(2000), seed=5, block_size=500)
    a = hit_probability("critical", origin, [2, 0, 0, 0, 0], binary, step, 2000, workers=1, **kwargs)
    b = hit_probability("critical", origin, [2, 0, 0, 0, 0], binary, step, 2000, workers=2, **kwargs)
    assert (a.hits, a.capped) == (b.hits, b.capped)
    assert a.low <= a.estimate <= a.high


def test_hit_probability_is_monotone_in_K_with_coupled_seeds(origin, binary, step):
    bigger = origin.union([0, 1, 0, 0, 0])
    kwargs = dict(budget=TreeBudget(5000), seed=8, early_exit=False, block_size=1000)
    small = hit_probability("critical", origin, [2, 0, 0, 0, 0], binary, step, 3000, **kwargs)
    large = hit_probability("critical", bigger, [2, 0, 0, 0, 0], binary, step, 3000, **kwargs)
    assert large.hits >= small.hits


def test_adjoint_hits_less_often_than_critical(origin, binary, step):
    x = [1, 1, 0, 0, 0]
    crit = hit_probability("critical", origin, x, binary, step, 20_000, TreeBudget(5000), seed=1)
    adj = hit_probability("adjoint", origin, x, binary, step, 20_000, TreeBudget(5000), seed=1)
    assert adj.estimate < crit.estimate


def test_invalid_arguments(origin, binary, step):
    with pytest.raises(ValidationError):
        hit_probability("critical", origin, E1, binary, step, 0, TreeBudget(10), seed=0)
    with pytest.raises(ValidationError):
        hit_probability("subcritical", origin, E1, binary, step, 10, TreeBudget(10), seed=0)


# ---------------------------------------------------------------- escape

def test_escape_estimate_and_complement(origin, binary, step):
    p_minus = escape_probability(origin, [0] * 5, binary, step, 400, small_policy(), TreeBudget(20_000),
                                 seed=2, block_size=200)
    e_K = p_minus.complement()
    assert 0.0 < e_K.estimate < 1.0
    assert e_K.estimate == pytest.approx(1.0 - p_minus.estimate)
    assert e_K.low == pytest.approx(1.0 - p_minus.high)
    assert p_minus.r_stop == 4.0
    assert p_minus.unit_remainder > 0


def test_escape_estimate_is_worker_invariant(origin, binary, step):
    args = (origin, [0] * 5, binary, step, 400, small_policy(), TreeBudget(20_000))
    a = escape_probability(*args, seed=6, block_size=100, workers=1)
    b = escape_probability(*args, seed=6, block_size=100, workers=2)
    assert a.to_dict() == b.to_dict()


def test_p_infinite_dominates_p_minus(origin, binary, step):
    x = [3, 0, 0, 0, 0]
    p_i = p_infinite(origin, x, binary, step, 400, TreeBudget(20_000), seed=4, policy=small_policy())
    p_m = escape_probability(origin, x, binary, step, 400, small_policy(), TreeBudget(20_000), seed=4)
    assert p_i.hits >= p_m.hits - 40


def test_remainder_tolerance_can_be_infeasible(origin, binary, step):
    policy = RemainderPolicy(r_stop=2.0, max_radius=2.0, adaptive=False, tolerance=1e-9)
    with pytest.raises(BracketInfeasibleError):
        escape_probability(origin, [0] * 5, binary, step, 100, policy, TreeBudget(1000), seed=0)


def test_adaptive_radius_cap_grows_in_low_dimension():
    policy = RemainderPolicy()
    assert [policy.radius_cap(d) for d in (5, 6, 7, 8)] == [64.0, 32.0, 16.0, 16.0]
    assert RemainderPolicy(max_radius=8.0).radius_cap(5) == 8.0


@pytest.mark.parametrize("fraction, expected", [(1e-9, True), (1e9, False)])
def test_escape_report_flags_a_dominating_remainder(origin, binary, step, fraction, expected):
    policy = RemainderPolicy(r_stop=2.0, max_radius=2.0, adaptive=False, fraction=fraction)
    est = escape_probability(origin, [0] * 5, binary, step, 100, policy, TreeBudget(1000), seed=0)
    assert est.r_stop == 2.0
    assert est.remainder_dominates is expected
    assert est.to_dict()["remainder_dominates"] is expected
    assert est.complement().remainder_dominates is expected


def test_bcap_hint_prices_the_remainder(origin, binary, step):
    est = escape_probability(origin, [0] * 5, binary, step, 200, small_policy(), TreeBudget(20_000), seed=9)
    priced = est.with_bcap(0.5, 10.0)
    assert priced.estimate >= est.estimate
    assert priced.low == pytest.approx(est.hits / est.samples)


@pytest.mark.slow
def test_spine_engine_agrees_with_batched(origin, binary, step):
    policy = RemainderPolicy(r_stop=4.0, max_radius=4.0, adaptive=False, prune_factor=3.0)
    kwargs = dict(samples=1500, policy=policy, budget=TreeBudget(20_000), seed=12)
    batched = escape_probability(origin, [0] * 5, binary, step, engine="batched", **kwargs)
    spine = escape_probability(origin, [0] * 5, binary, step, engine="spine", **kwargs)
    assert abs(batched.estimate - spine.estimate) < 2.0 * (batched.half_width + spine.half_width)
