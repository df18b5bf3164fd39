"""Step laws, θ-norm, box geometry and Green function tables."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exceptions import ValidationError
from lattice import (BoxGeometry, ThetaNorm, c_g_constant, canonicalize, green_ray, green_table,
                     iter_ball_points, make_step_law, orbit_sizes, second_order_asymptotic_constant,
                     second_order_kernel, second_order_table)
from runtime import TableCache

# g(0) for the simple walk: 1 / (1 - return probability).
G0_SIMPLE = {5: 1.156308, 6: 1.116963}


@pytest.fixture(scope="module")
def simple5():
    return make_step_law("simple", 5)


@pytest.fixture(scope="module")
def table5(simple5):
    return green_table(simple5, 4)


def test_simple_walk_moments():
    law = make_step_law("simple", 5)
    np.testing.assert_allclose(law.covariance, np.eye(5) / 5)
    assert law.symmetry_mode == "hyperoctahedral"
    assert law.period == 2
    assert law.support_radius == 1


def test_lazy_walk_is_aperiodic_with_half_covariance():
    law = make_step_law("lazy_simple", 6)
    np.testing.assert_allclose(law.covariance, np.eye(6) / 12)
    assert law.period == 1


def test_custom_law_merges_repeated_vectors():
    e = [1, 0, 0, 0, 0]
    support = [(e, 0.05), (e, 0.05), ([-1, 0, 0, 0, 0], 0.1)]
    for i in range(1, 5):
        v = [0] * 5
        v[i] = 1
        support += [(v, 0.1), ([-c for c in v], 0.1)]
    law = make_step_law("custom", 5, support)
    assert len(law.vectors) == 10
    assert law.symmetry_mode == "hyperoctahedral"


@pytest.mark.parametrize("support, reason", [
    ([([1, 0, 0, 0, 0], 0.6), ([-1, 0, 0, 0, 0], 0.4)], "asymmetric"),
    ([([1, 0, 0, 0, 0], 0.5), ([-1, 0, 0, 0, 0], 0.5)], "degenerate"),
    ([([2 if j == i else 0 for j in range(5)], 0.1) for i in range(5)]
     + [([-2 if j == i else 0 for j in range(5)], 0.1) for i in range(5)], "sublattice"),
])
def test_invalid_custom_laws(support, reason):
    with pytest.raises(ValidationError):
        make_step_law("custom", 5, support)


def test_probabilities_must_sum_to_one():
    with pytest.raises(ValidationError):
        make_step_law("custom", 1, [([1], 0.4), ([-1], 0.4)])


def test_unknown_kind():
    with pytest.raises(ValidationError):
        make_step_law("knight", 5)


def test_c_g_closed_form(simple5):
    expected = math.gamma(1.5) / (2.0 * math.pi ** 2.5) * 5 ** 2.5
    assert c_g_constant(simple5) == pytest.approx(expected, rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=5, max_size=5), st.permutations(range(5)),
       st.lists(st.sampled_from([-1, 1]), min_size=5, max_size=5))
def test_theta_norm_invariant_under_lattice_symmetries(x, perm, signs):
    norm = ThetaNorm(make_step_law("simple", 5))
    y = np.asarray(x)[list(perm)] * np.asarray(signs)
    assert norm(np.asarray(x)) == pytest.approx(norm(y), rel=1e-12)
    assert norm(np.asarray(x)) == pytest.approx(math.sqrt(5) * np.linalg.norm(x), rel=1e-12)


@pytest.mark.parametrize("mode", ["hyperoctahedral", "signs", "axis", "axis_signs", "none"])
def test_box_orbits_cover_the_full_box(mode):
    geom = BoxGeometry(3, 3, mode)
    assert int(geom.multiplicity.sum()) == 7 ** 3
    idx = geom.lookup(np.array([[3, -1, 2], [4, 0, 0]]))
    assert idx[0] >= 0 and idx[1] == -1
    assert np.array_equal(geom.points[idx[0]], canonicalize(np.array([3, -1, 2]), mode))


def test_orbit_sizes_hyperoctahedral():
    sizes = orbit_sizes(np.array([[0, 0, 0], [1, 0, 0], [1, 1, 0], [2, 1, 0]]), "hyperoctahedral")
    assert sizes.tolist() == [1, 6, 12, 24]


def test_axis_modes_keep_the_first_coordinate():
    assert canonicalize(np.array([-2, 1, -3, 0]), "axis").tolist() == [-2, 3, 1, 0]
    assert canonicalize(np.array([-2, 1, -3, 0]), "axis_signs").tolist() == [-2, 1, 3, 0]
    sizes = orbit_sizes(np.array([[5, 0, 0, 0], [-1, 1, 0, 0], [0, 2, 1, 0]]), "axis")
    assert sizes.tolist() == [1, 6, 24]


@pytest.mark.parametrize("mode", ["axis", "axis_signs"])
def test_axis_l1_ball_orbits_cover_the_ball(mode):
    geom = BoxGeometry(3, 2, mode, norm="l1")
    assert int(geom.multiplicity.sum()) == len(BoxGeometry(3, 2, "none", norm="l1"))


def test_axis_stencil_matches_the_full_box():
    step = make_step_law("simple", 4)
    full, axis = BoxGeometry(4, 3, "none"), BoxGeometry(4, 3, "axis")

    def f(p):
        return p[:, 0] ** 3 + (p[:, 1:] ** 2).sum(axis=1)

    sf, sa = full.stencil(step), axis.stencil(step)
    on_full = sf.inner() @ f(full.points) + sf.outer() @ f(sf.exterior_points)
    on_axis = sa.inner() @ f(axis.points) + sa.outer() @ f(sa.exterior_points)
    np.testing.assert_allclose(on_axis, on_full[full.lookup(axis.points)])
    assert len(axis) < len(full) / 4


@pytest.mark.parametrize("d, radius, count", [(2, 1, 5), (3, 1, 7), (5, 1, 11), (2, 2, 13)])
def test_iter_ball_points_counts(d, radius, count):
    assert sum(len(slab) for slab in iter_ball_points(d, radius)) == count


def test_green_at_origin_matches_return_probability(table5):
    g0 = table5.value(np.zeros((1, 5)))[0]
    assert g0 == pytest.approx(G0_SIMPLE[5], rel=2e-5)


def test_green_table_is_harmonic_off_the_origin(table5):
    assert table5.harmonicity_residual() < 1e-7


def test_green_table_is_symmetric(table5):
    pts = np.array([[1, 2, 0, 0, 0], [0, 0, -2, 1, 0], [2, 0, 0, 0, -1]])
    vals = table5.value(pts)
    assert vals[0] == pytest.approx(vals[1], rel=1e-14)
    assert vals[0] == pytest.approx(vals[2], rel=1e-14)


def test_green_outside_table_is_rejected(table5):
    with pytest.raises(ValidationError):
        table5.value(np.array([[5, 0, 0, 0, 0]]))


def test_green_ray_approaches_the_asymptotic_law(table5):
    rows = green_ray(table5, [1, 0, 0, 0, 0], 10)
    assert [r["x"] for r in rows][:2] == ["0 0 0 0 0", "1 0 0 0 0"]
    assert len(rows) == 5
    assert math.isnan(rows[0]["ratio"])
    ratios = [r["ratio"] for r in rows[1:]]
    assert abs(ratios[-1] - 1.0) < abs(ratios[0] - 1.0)


def test_green_tables_for_d6():
    table = green_table(make_step_law("simple", 6), 2)
    assert table.value(np.zeros((1, 6)))[0] == pytest.approx(G0_SIMPLE[6], rel=2e-5)


def test_green_table_needs_d5(simple5):
    with pytest.raises(ValidationError):
        green_table(make_step_law("simple", 4), 3)
    with pytest.raises(ValidationError):
        green_table(simple5, 3, method="monte_carlo")


def test_green_table_cache_hit(tmp_path, simple5):
    cache = TableCache(str(tmp_path))
    first = green_table(simple5, 2, cache=cache)
    assert list(tmp_path.glob("green-*.joblib"))
    second = green_table(simple5, 2, cache=cache)
    np.testing.assert_array_equal(first.values, second.values)
    assert second.header()["law_hash"] == simple5.digest()


def test_second_order_constant_is_positive(simple5):
    assert second_order_asymptotic_constant(simple5) > 0


@pytest.mark.slow
def test_neumann_route_agrees_with_fourier(simple5):
    fourier = green_table(simple5, 3)
    neumann = green_table(simple5, 3, method="neumann", tol=1e-4)
    np.testing.assert_allclose(neumann.values, fourier.values, rtol=1e-3)


def test_convolution_rejects_points_near_the_edge(table5):
    with pytest.raises(ValidationError):
        second_order_kernel(table5, [4, 0, 0, 0, 0])


@pytest.mark.slow
def test_convolution_matches_the_second_order_table(simple5):
    first = green_table(simple5, 12)
    direct = second_order_table(simple5, 1).value(np.zeros((1, 5)))[0]
    assert second_order_kernel(first, [0] * 5, tol=5e-2) == pytest.approx(direct, rel=2e-2)
