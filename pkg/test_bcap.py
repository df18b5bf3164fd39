"""Branching capacity estimators and the ratio diagnostics."""

from itertools import combinations

import numpy as np
import pytest

from bcap import (BcapParams, adjoint_ratio_diag, bcap_all, bcap_far_field, bcap_harmonic, bcap_sum_escape,
                  check_envelope, default_ladder, one_step_hull, rate_exponent)
from brw_mc import LatticeSet, RemainderPolicy
from exceptions import ValidationError
from field_solver import BoundaryPolicy
from lattice import make_step_law
from offspring import make_offspring
from reference_data import ReferenceData


@pytest.fixture(scope="module")
def step():
    return make_step_law("simple", 5)


@pytest.fixture(scope="module")
def binary():
    return make_offspring("binary_critical")


@pytest.fixture(scope="module")
def origin():
    return LatticeSet.parse("point:0", 5)


def dirichlet_params(R_box: int = 3) -> BcapParams:
    return BcapParams(R_box=R_box, policy=BoundaryPolicy("dirichlet_zero"), tol=1e-12)


@pytest.mark.parametrize("d", [5, 6, 7])
def test_rate_exponent_matches_reference(d):
    assert rate_exponent(d) == pytest.approx(ReferenceData().rate_exponent(d))


def test_envelope_flags(origin):
    assert check_envelope(0.3, origin, 50.0) == {"positive": True, "below_envelope": True}
    assert check_envelope(0.0, origin, 50.0)["positive"] is False
    assert check_envelope(80.0, origin, 50.0)["below_envelope"] is False


def test_harmonic_route_equals_sum_of_escapes(origin, binary, step):
    params = dirichlet_params()
    summed = bcap_sum_escape(origin, binary, step, "solver", params)
    harmonic = bcap_harmonic(origin, None, binary, step, params)
    assert 0.0 < summed.value < 1.0
    assert harmonic.value == pytest.approx(summed.value, abs=1e-9)
    assert harmonic.details["B_size"] == 11


def test_capacity_is_translation_invariant(origin, binary, step):
    params = dirichlet_params()
    here = bcap_sum_escape(origin, binary, step, "solver", params)
    there = bcap_sum_escape(origin.translate([7, -3, 0, 2, 0]), binary, step, "solver", params)
    assert there.value == pytest.approx(here.value, rel=1e-12)


def test_capacity_grows_with_the_set(origin, binary, step):
    params = dirichlet_params(4)
    point = bcap_sum_escape(origin, binary, step, "solver", params)
    ball = bcap_sum_escape(LatticeSet.parse("ball:1", 5), binary, step, "solver", params)
    assert point.value < ball.value < 11.0 * point.value


def test_harmonic_route_rejects_B_without_K(origin, binary, step):
    with pytest.raises(ValidationError):
        bcap_harmonic(origin, LatticeSet([[1, 0, 0, 0, 0]]), binary, step, dirichlet_params())


def test_unknown_mode(origin, binary, step):
    with pytest.raises(ValidationError):
        bcap_sum_escape(origin, binary, step, "exact", dirichlet_params())


def test_bracket_uses_the_dirichlet_field(origin, binary, step):
    params = BcapParams(R_box=4, tol=1e-12, bracket=True)
    est = bcap_sum_escape(origin, binary, step, "solver", params)
    assert est.high is not None
    assert est.high >= est.value - 1e-12
    assert est.half_width == pytest.approx(abs(est.high - est.value))


def test_default_ladder_stays_in_the_reliable_zone(origin):
    ladder = default_ladder(origin, 2.0, 10, 3)
    assert [int(x[0]) for x in ladder] == sorted({int(x[0]) for x in ladder})
    assert all(3 <= x[0] <= 7 for x in ladder)
    assert default_ladder(origin, 2.0, 4, 3) == []


def test_far_field_ratio_ladder(origin, binary, step):
    est = bcap_far_field(origin, binary, step, params=BcapParams(R_box=8, tol=1e-12), reference=0.3)
    frame = est.details["ladder"]
    assert len(frame) >= 2 and frame["reliable"].all()
    assert (frame["ratio"] > 0).all()
    assert est.value == pytest.approx(frame["ratio"].iloc[-1])
    assert est.details["rate"]["alpha"] == pytest.approx(0.125)
    assert "ladder" not in est.to_dict()


def test_all_routes_report_a_common_spread(origin, binary, step):
    out = bcap_all(origin, binary, step, BcapParams(R_box=8, tol=1e-12))
    assert set(out) == {"harmonic_measure", "sum_escape", "far_field"}
    assert out["harmonic_measure"].value == pytest.approx(out["sum_escape"].value, rel=1e-6)
    spread = out["far_field"].details["relative_spread"]
    assert spread >= 0.0
    assert len({e.digest for e in out.values()}) == 3


def test_monte_carlo_sum_of_escapes(origin, binary, step):
    params = BcapParams(samples=300, v_max=20_000, seed=3, block_size=100, workers=1,
                        remainder=RemainderPolicy(r_stop=4.0, max_radius=4.0, adaptive=False))
    est = bcap_sum_escape(origin, binary, step, "mc", params)
    assert 0.0 < est.value < 1.0
    assert est.low <= est.high
    assert est.details["mode"] == "mc"


@pytest.mark.parametrize("kind, target", [("binary_critical", 0.5), ("geometric_half", 1.0)])
def test_adjoint_ratio_ladder(kind, target, origin, step):
    diag = adjoint_ratio_diag(origin, make_offspring(kind), step, params=BcapParams(R_box=8, tol=1e-12))
    assert diag["target"] == pytest.approx(target)
    assert list(diag["ladder"].columns) == ["x", "p_adj_ratio", "p_I_ratio", "p_minus_ratio"]
    for name, plateau in diag["plateau"].items():
        assert abs(plateau / target - 1.0) < 0.15, name
        assert diag["relative_deviation"][name] == pytest.approx(abs(plateau / target - 1.0))


def test_ratio_diagnostic_needs_a_finite_third_moment(origin, binary, step, monkeypatch):
    assert binary.third_moment == pytest.approx(4.0)
    assert make_offspring("geometric_half").third_moment == pytest.approx(13.0)
    monkeypatch.setattr(type(binary), "third_moment", property(lambda self: float("inf")))
    assert not binary.third_moment_finite
    with pytest.raises(ValidationError):
        adjoint_ratio_diag(origin, binary, step, params=BcapParams(R_box=8, tol=1e-12))


def test_one_step_hull(origin, step):
    hull = one_step_hull(origin, step)
    assert len(hull) == 11
    assert np.all(hull.contains(origin.points))


@pytest.mark.slow
def test_cross_method_agreement(binary, step):
    fixture = ReferenceData().fixture("cross_method")
    K = LatticeSet.parse(fixture["set"], fixture["d"])
    law = make_offspring(fixture["offspring"])
    harmonic = bcap_harmonic(K, None, law, step, BcapParams(R_box=12, tol=1e-12))
    far = bcap_far_field(K, law, step, None, "solver", BcapParams(R_box=16, tol=1e-12))
    mc = bcap_sum_escape(K, law, step, "mc", BcapParams(samples=20_000, seed=1))
    estimates = {"harmonic_measure": harmonic, "far_field": far, "sum_escape_mc": mc}
    # statistical slack only for the Monte Carlo route
    slack = {name: 2.0 * e.half_width / e.value if name.endswith("_mc") else 0.0 for name, e in estimates.items()}
    for a, b in combinations(estimates, 2):
        spread = abs(estimates[a].value / estimates[b].value - 1.0)
        assert spread < fixture["relative_tolerance"] + slack[a] + slack[b], (a, b)
