"""Lattice fixed-point fields, the killed Green function and the identity residuals."""

import numpy as np
import pytest

from bcap import one_step_hull
from brw_mc import LatticeSet
from exceptions import BracketInfeasibleError, ValidationError
from field_solver import (BoundaryPolicy, BoxProblem, KilledWalk, green_comparison, green_killed,
                          harmonic_measure, identity_report, identity_targets, inequality_report, solve_all,
                          solve_p_adj, solve_p_c, solve_p_minus, target_mode)
from lattice import make_step_law
from offspring import make_offspring

E1 = [1, 0, 0, 0, 0]
DIRICHLET = BoundaryPolicy("dirichlet_zero")


@pytest.fixture(scope="module")
def step():
    return make_step_law("simple", 5)


@pytest.fixture(scope="module")
def binary():
    return make_offspring("binary_critical")


@pytest.fixture(scope="module")
def origin():
    return LatticeSet.parse("point:0", 5)


@pytest.fixture(scope="module")
def fields(origin, binary, step):
    return solve_all(origin, binary, step, 3, DIRICHLET, tol=1e-12)


@pytest.fixture(scope="module")
def killed(origin, fields):
    targets = np.vstack([origin.points, [E1], [[2, 0, 0, 0, 0]]])
    return green_killed(origin, fields.p_adj, targets, tol=1e-12)


def test_exact_identities_under_dirichlet_closure(origin, step, fields, killed):
    report = identity_report(fields, killed, B=one_step_hull(origin, step))
    for name in ("p_c_from_G", "p_I_from_G", "reversibility", "first_entrance", "last_exit",
                 "bcap_harmonic_vs_sum"):
        assert report[name] < 1e-8, name
    assert report["G_K_over_box_green"] <= 1e-10


def test_p_minus_picard_matches_the_direct_solve(origin, binary, step, fields):
    p_adj = solve_p_adj(origin, binary, step, fields.p_c)
    np.testing.assert_array_equal(p_adj.values, fields.p_adj.values)
    p_minus, p_i = solve_p_minus(origin, binary, step, p_adj, tol=1e-13, method="picard")
    np.testing.assert_allclose(p_minus.values, fields.p_minus.values, atol=1e-8)
    assert np.all(p_i.values >= p_adj.values - 1e-14)
    with pytest.raises(ValidationError):
        solve_p_minus(origin, binary, step, p_adj, method="cg")


@pytest.mark.parametrize("kind", ["binary_critical", "geometric_half"])
def test_field_comparisons_hold(kind, origin, step):
    found = solve_all(origin, make_offspring(kind), step, 3, DIRICHLET, tol=1e-12)
    report = inequality_report(found)
    assert set(report) == {"adj_lower", "adj_upper", "c_below_I", "adj_below_minus", "minus_below_I",
                           "I_below_minus"}
    for name, value in report.items():
        assert value <= 1e-12, name


def test_fields_are_probabilities(fields):
    for fld in (fields.p_c, fields.p_adj, fields.p_minus, fields.p_I):
        assert np.all(fld.values >= -1e-14) and np.all(fld.values <= 1.0 + 1e-14)
    assert fields.p_c.value([[0] * 5])[0] == 1.0
    e_K = fields.escape_on_K()["e_K"].iloc[0]
    assert 0.0 < e_K < 1.0


def test_dirichlet_field_grows_with_the_box(origin, binary, step):
    small = solve_p_c(origin, binary, step, 3, DIRICHLET, tol=1e-12)
    large = solve_p_c(origin, binary, step, 5, DIRICHLET, tol=1e-12)
    assert large.value([E1])[0] > small.value([E1])[0]


def test_matched_closure_lies_above_dirichlet(origin, binary, step):
    lower = solve_p_c(origin, binary, step, 4, DIRICHLET, tol=1e-12)
    matched = solve_p_c(origin, binary, step, 4, BoundaryPolicy("matched_asymptotic"), tol=1e-12)
    assert matched.coefficient > 0
    assert np.all(matched.values >= lower.values - 1e-12)


def test_picard_agrees_with_newton(origin, binary, step):
    newton = solve_p_c(origin, binary, step, 3, DIRICHLET, tol=1e-12)
    picard = solve_p_c(origin, binary, step, 3, DIRICHLET, tol=1e-12, method="picard")
    np.testing.assert_allclose(picard.values, newton.values, atol=1e-8)


def test_box_problem_rejects_bad_inputs(step):
    with pytest.raises(ValidationError):
        BoxProblem(LatticeSet.parse("ball:2", 5), step, 3, DIRICHLET)
    with pytest.raises(ValidationError):
        BoxProblem(LatticeSet.parse("point:0", 4), make_step_law("simple", 4), 3, DIRICHLET)
    with pytest.raises(ValidationError):
        BoundaryPolicy("periodic")


def test_green_comparison_deficits(fields):
    frame = green_comparison(fields, [1, 2])
    assert list(frame.columns) == ["s", "max_deficit", "pairs"]
    assert len(frame) == 2
    assert (frame["pairs"] > 0).all()
    assert ((frame["max_deficit"] >= 0.0) & (frame["max_deficit"] < 1.0)).all()


def test_green_comparison_rejects_rungs_outside_the_box(fields):
    with pytest.raises(BracketInfeasibleError) as exc:
        green_comparison(fields, [1, 4])
    assert exc.value.details["s"] == [4.0]
    assert exc.value.details["R_box_needed"] == 5


def test_axis_reduced_green_matches_the_full_box(fields, killed):
    assert killed.geometry.mode == "axis"
    full = KilledWalk.from_field(fields.p_adj, "none")
    pts = full.geometry.points
    for y in ([0] * 5, E1):
        delta = np.zeros(len(pts))
        delta[full.geometry.lookup([y])[0]] = 1.0
        np.testing.assert_allclose(killed.G(pts, y), full.potential(delta), atol=1e-12)


def test_symmetric_potential_matches_the_reduced_walk(origin, fields):
    sym, full = KilledWalk.from_field(fields.p_adj), KilledWalk.from_field(fields.p_adj, "none")
    assert sym.geometry.mode == "hyperoctahedral"
    on_sym = sym.potential(sym.kill)
    on_full = full.potential(full.kill)
    np.testing.assert_allclose(on_sym[sym.geometry.lookup(full.geometry.points)], on_full, atol=1e-12)


def test_target_mode():
    assert target_mode("hyperoctahedral", np.zeros((1, 5), dtype=np.int64)) == "hyperoctahedral"
    assert target_mode("hyperoctahedral", np.array([[0] * 5, [-3, 0, 0, 0, 0]])) == "axis"
    assert target_mode("signs", np.array([[2, 0, 0, 0, 0]])) == "axis_signs"
    assert target_mode("hyperoctahedral", np.array([[1, 1, 0, 0, 0]])) == "none"


def test_killed_walk_rejects_a_larger_group(binary, step):
    K = LatticeSet.parse("point:1,0,0,0,0", 5)
    found = solve_all(K, binary, step, 3, DIRICHLET, tol=1e-12)
    assert found.p_adj.geometry.mode == "none"
    with pytest.raises(ValidationError):
        KilledWalk.from_field(found.p_adj, "axis")


def test_identity_targets_stay_on_the_axis(origin, step, fields):
    B = one_step_hull(origin, step)
    targets = identity_targets(fields, B)
    assert not np.any(targets[:, 1:])
    assert (~B.contains(targets)).sum() == 1
    assert B.contains(targets).sum() == 2


def test_harmonic_measure_weights(origin, step, fields):
    B = one_step_hull(origin, step)
    table = harmonic_measure(origin, B, fields.p_adj, pairs=[([0] * 5, [2, 0, 0, 0, 0])])
    assert table.weight([2, 0, 0, 0, 0], [0] * 5) > 0
    frame = table.to_frame()
    assert (frame["weight"] > 0).all()
    with pytest.raises(ValidationError):
        harmonic_measure(origin, LatticeSet([E1]), fields.p_adj)


@pytest.mark.slow
@pytest.mark.parametrize("spec", ["point:0", "ball:2"])
def test_identity_acceptance(spec, binary, step):
    from reference_data import ReferenceData

    fixture = ReferenceData().fixture("identities")
    K = LatticeSet.parse(spec, fixture["d"])
    found = solve_all(K, binary, step, fixture["R_box"], DIRICHLET, tol=1e-12)
    assert found.p_adj.geometry.mode == "hyperoctahedral"
    B = one_step_hull(K, step)
    green = green_killed(K, found.p_adj, identity_targets(found, B), tol=1e-12)
    assert green.geometry.mode == "axis"
    report = identity_report(found, green, B=B)
    for name in ("p_c_from_G", "p_I_from_G", "reversibility", "first_entrance", "last_exit",
                 "bcap_harmonic_vs_sum"):
        assert report[name] < fixture["tolerance"], name
    assert report["G_K_over_box_green"] <= 1e-10


@pytest.mark.slow
def test_green_comparison_deficit_decreases_along_the_ladder(binary, step):
    from reference_data import ReferenceData

    fixture = ReferenceData().fixture("green_comparison")
    K = LatticeSet.parse(fixture["set"], fixture["d"])
    found = solve_all(K, binary, step, fixture["R_box"], DIRICHLET, tol=1e-12)
    frame = green_comparison(found, fixture["s"])
    assert frame["s"].tolist() == fixture["s"]
    assert (frame["pairs"] > 0).all()
    assert ((frame["max_deficit"] >= 0.0) & (frame["max_deficit"] < 1.0)).all()
    assert np.all(np.diff(frame["max_deficit"].to_numpy()) <= 0)
