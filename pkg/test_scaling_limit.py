"""Continuum constants and the dilation ladder."""

import math

import numpy as np
import pytest

from bcap import BcapParams
from exceptions import ValidationError
from field_solver import BoundaryPolicy
from lattice import c_g_constant, make_step_law
from offspring import make_offspring
from reference_data import ReferenceData
from scaling_limit import (ScalingParams, c_theta, continuum_target, dilate, isotropic_scale, on_sphere,
                           resolve_a0, run_scaling, simple_walk_constant)

REF = ReferenceData()


@pytest.mark.parametrize("kind, d", [("simple", 5), ("simple", 6), ("lazy_simple", 5)])
@pytest.mark.parametrize("offspring", ["binary_critical", "geometric_half"])
def test_c_theta_forms_agree(kind, d, offspring):
    law, step = make_offspring(offspring), make_step_law(kind, d)
    ct = c_theta(law, step)
    assert ct * c_g_constant(step) * law.variance / 2.0 == pytest.approx(1.0, rel=1e-12)


def test_simple_walk_constant_reference():
    expected = REF.scaling_constant("simple_walk_constant_d6_sigma2_2")
    assert simple_walk_constant(6, 2.0) == pytest.approx(expected, rel=1e-12)
    assert simple_walk_constant(6, 2.0) == pytest.approx(math.pi ** 3 / 2.0, rel=1e-14)
    assert 6.0 * simple_walk_constant(6, 2.0) == pytest.approx(REF.scaling_constant("simple_walk_bscap_d6_rho1"))


def test_simple_walk_constant_exceeds_the_target_by_d_squared_over_d_minus_two():
    law, step = make_offspring("binary_critical"), make_step_law("simple", 6)
    target = continuum_target(1.0, law, step, "closed_form")
    simple = simple_walk_constant(6, law.variance) * 6.0
    assert simple / target == pytest.approx(36.0 / 4.0, rel=1e-12)


def test_continuum_target_scales_with_the_radius():
    law, step = make_offspring("binary_critical"), make_step_law("simple", 5)
    one = continuum_target(1.0, law, step, 2.0)
    assert continuum_target(3.0, law, step, 2.0) == pytest.approx(3.0 * one, rel=1e-14)
    with pytest.raises(ValidationError):
        continuum_target(0.0, law, step, 2.0)


def test_resolve_a0():
    assert resolve_a0(6, "closed_form") == 6.0
    assert resolve_a0(5, 1.5) == 1.5
    with pytest.raises(ValidationError):
        resolve_a0(5, "closed_form")
    with pytest.raises(ValidationError):
        resolve_a0(5, "guess")


def test_anisotropic_law_has_no_ball_target():
    support = [([1, 0, 0, 0, 0], 0.2), ([-1, 0, 0, 0, 0], 0.2)]
    for i in range(1, 5):
        v = [0] * 5
        v[i] = 1
        support += [(v, 0.075), ([-c for c in v], 0.075)]
    with pytest.raises(ValidationError):
        isotropic_scale(make_step_law("custom", 5, support))
    assert isotropic_scale(make_step_law("simple", 5)) == pytest.approx(0.2)


def test_dilations():
    assert len(dilate("ball", 1.0, 2, 3)) == 33
    assert len(dilate("box", 0.5, 2, 3)) == 27
    with pytest.raises(ValidationError):
        dilate("torus", 1.0, 1, 3)


def test_points_on_the_sphere():
    assert on_sphere(1.0, 1, 5) == 10
    assert on_sphere(0.5, 1, 5) == 0


def small_params(**overrides) -> ScalingParams:
    bcap = BcapParams(policy=BoundaryPolicy("dirichlet_zero"), tol=1e-12)
    return ScalingParams(bcap=bcap, box_factor=1.0, margin=3, a0_source=2.0, workers=1, **overrides)


def test_ladder_run():
    law, step = make_offspring("binary_critical"), make_step_law("simple", 5)
    run = run_scaling(1.0, [1, 2], law, step, small_params())
    frame = run.frame
    assert frame["n"].tolist() == [1, 2]
    assert (frame["rescaled"] > 0).all()
    assert frame["rescaled"].iloc[1] == pytest.approx(frame["estimate"].iloc[1] / 2.0)
    assert np.isnan(frame["cauchy_diff"].iloc[0])
    assert run.target == pytest.approx(continuum_target(1.0, law, step, 2.0))
    assert run.trend["all_within_envelope"] is True
    payload = run.to_dict()
    assert payload["target_provenance"].startswith("c_theta")
    assert len(payload["rows"]) == 2


def test_box_shape_runs_without_a_target():
    law, step = make_offspring("binary_critical"), make_step_law("simple", 5)
    run = run_scaling(1.0, [1], law, step, small_params(), shape="box")
    assert run.target is None
    assert np.isnan(run.frame["ratio_to_target"].iloc[0])


def test_failed_ladder_points_are_skipped():
    law, step = make_offspring("binary_critical"), make_step_law("simple", 5)
    run = run_scaling(1.0, [1, 2], law, step, small_params(method="bogus"))
    assert run.frame.empty
    assert set(run.skipped) == {1, 2}
    assert run.skipped[1]["error"] == "ValidationError"


@pytest.mark.parametrize("ladder", [[], [2, 1], [0, 1]])
def test_ladder_must_increase(ladder):
    law, step = make_offspring("binary_critical"), make_step_law("simple", 5)
    with pytest.raises(ValidationError):
        run_scaling(1.0, ladder, law, step, small_params())


@pytest.mark.slow
def test_scaling_ladder_acceptance():
    fixture = REF.fixture("scaling_ladder")
    law, step = make_offspring("binary_critical"), make_step_law("simple", fixture["d"])
    run = run_scaling(fixture["rho"], fixture["ladder"], law, step, ScalingParams(workers=1))
    lo, hi = fixture["ratio_band"]
    assert not run.skipped
    assert (run.frame["rescaled"] > 0).all()
    assert run.trend["all_within_envelope"]
    assert run.trend["cauchy_decreasing"]
    assert lo <= run.frame["ratio_to_target"].iloc[-1] <= hi
