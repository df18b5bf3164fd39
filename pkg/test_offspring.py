"""Offspring laws, the adjoint law and the tree samplers."""

from itertools import islice

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from exceptions import ValidationError
from offspring import (Outcome, TreeBudget, adjoint, make_offspring, sample_adjoint_tree,
                       sample_critical_tree, spine_iterator, tree_size_counts)


def three_point_law(k: int, frac: float):
    """Critical pmf on {0, 1, k}: μ(k) = a, μ(0) = a(k-1), μ(1) = 1 - ak."""
    a = frac / k
    pmf = np.zeros(k + 1)
    pmf[k], pmf[0], pmf[1] = a, a * (k - 1), 1.0 - a * k
    return make_offspring("custom", {"pmf": pmf, "name": f"three_point_{k}"})


@pytest.mark.parametrize("kind, variance, mu0", [
    ("binary_critical", 1.0, 0.5),
    ("geometric_half", 2.0, 0.5),
])
def test_builtin_laws(kind, variance, mu0):
    law = make_offspring(kind)
    assert law.variance == pytest.approx(variance)
    assert law.mu0 == pytest.approx(mu0)
    assert law.mean() == pytest.approx(1.0)


def test_truncated_poisson_is_critical():
    law = make_offspring("poisson_trunc", {"k_max": 10})
    assert law.pmf.sum() == pytest.approx(1.0, abs=1e-12)
    assert law.mean() == pytest.approx(1.0, abs=1e-12)
    assert law.variance == pytest.approx(1.0, abs=1e-3)
    assert law.period == 1


def test_binary_law_has_period_two():
    assert make_offspring("binary_critical").period == 2


@pytest.mark.parametrize("pmf", [[0.3, 0.3, 0.4], [0.6, 0.4], [0.0, 1.0], [0.5, -0.1, 0.6]])
def test_invalid_custom_pmfs(pmf):
    with pytest.raises(ValidationError):
        make_offspring("custom", {"pmf": pmf})


def test_unknown_kind():
    with pytest.raises(ValidationError):
        make_offspring("zipf")


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.floats(0.05, 0.95))
def test_adjoint_mean_is_half_the_variance(k, frac):
    law = three_point_law(k, frac)
    assert adjoint(law).mean() == pytest.approx(law.variance / 2.0, rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.floats(0.05, 0.95), st.floats(0.0, 1.0))
def test_generating_function_identity(k, frac, s):
    law = three_point_law(k, frac)
    lhs = 1.0 - law.gf(s)
    rhs = (1.0 - s) * adjoint(law).gf(s)
    assert lhs == pytest.approx(rhs, abs=1e-12)


def test_geometric_law_is_its_own_adjoint():
    law = make_offspring("geometric_half")
    s = np.linspace(0.0, 1.0, 11)
    np.testing.assert_allclose(adjoint(law).gf(s), law.gf(s))
    np.testing.assert_allclose(1.0 - law.gf(s), (1.0 - s) * adjoint(law).gf(s))


def test_tree_budget_must_be_positive():
    with pytest.raises(ValidationError):
        TreeBudget(0)


def test_sampled_trees_are_reproducible_and_breadth_first():
    law = make_offspring("binary_critical")
    budget = TreeBudget(10_000)
    for index in range(20):
        a = sample_critical_tree(law, budget, seed=11, index=index)
        b = sample_critical_tree(law, budget, seed=11, index=index)
        np.testing.assert_array_equal(a.parent, b.parent)
        assert a.parent[0] == -1
        assert np.all(a.parent[1:] < np.arange(1, a.size))
        assert np.all(np.diff(a.depth) >= 0)
        if a.outcome == Outcome.COMPLETED:
            assert a.size % 2 == 1


def test_budget_caps_trees():
    law = make_offspring("binary_critical")
    outcomes = {sample_critical_tree(law, TreeBudget(1), 3, i).outcome for i in range(40)}
    assert outcomes == {Outcome.COMPLETED, Outcome.CAPPED}


def test_adjoint_root_uses_the_adjoint_law():
    law = make_offspring("binary_critical")
    budget = TreeBudget(10_000)
    for i in range(200):
        tree = sample_adjoint_tree(law, budget, 5, i)
        generations = tree.generations()
        root_children = len(generations[1]) if len(generations) > 1 else 0
        assert root_children in (0, 1)


def test_spine_items_depend_on_index_only():
    law = make_offspring("geometric_half")
    first = {i: tree.size for i, tree in islice(spine_iterator(law, seed=2), 5)}
    shifted = {i: tree.size for i, tree in islice(spine_iterator(law, seed=2, start=1), 4)}
    assert sorted(shifted) == [1, 2, 3, 4]
    assert all(first[i] == shifted[i] for i in shifted)


def test_tree_sizes_are_block_and_worker_invariant():
    law = make_offspring("geometric_half")
    a = tree_size_counts(law, 5000, 200, seed=4, block_size=1000, workers=1)
    b = tree_size_counts(law, 5000, 200, seed=4, block_size=1000, workers=2)
    np.testing.assert_array_equal(a.counts, b.counts)
    assert a.counts.sum() + a.capped == 5000


def test_tree_size_law_normalization():
    law = make_offspring("geometric_half")
    result = tree_size_counts(law, 200_000, 2000, seed=1, block_size=50_000)
    rows = result.rows(range(20, 41))
    mean_ratio = np.mean([r["normalized_ratio"] for r in rows])
    assert 0.85 < mean_ratio < 1.15


def test_periodic_law_bins_by_residue():
    law = make_offspring("binary_critical")
    result = tree_size_counts(law, 20_000, 500, seed=9, block_size=5000)
    rows = result.rows([10, 11])
    assert rows[0]["empirical_pmf"] == 0.0
    assert np.isnan(rows[0]["normalized_ratio"])
    assert rows[1]["residue"] == 0


@pytest.mark.slow
def test_tree_size_law_acceptance_band():
    from reference_data import ReferenceData

    fixture = ReferenceData().fixture("tree_size_law")
    law = make_offspring(fixture["offspring"])
    lo, hi = fixture["n_range"]
    result = tree_size_counts(law, fixture["samples"], hi, seed=0)
    ratios = np.array([r["normalized_ratio"] for r in result.rows(range(lo, hi + 1))])
    # Windows of 50 sizes keep the per-window standard error near 1%.
    pooled = [window.mean() for window in np.array_split(ratios, len(ratios) // 50)]
    band_lo, band_hi = fixture["band"]
    assert all(band_lo < value < band_hi for value in pooled)
