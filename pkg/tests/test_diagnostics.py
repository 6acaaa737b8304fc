import numpy as np
import pytest

from balweights import diagnostics as dg
from balweights.balance.problem import assemble_problem, solve_admm
from balweights.basis import BasisSpec, expand
from balweights.data import empirical_target
from balweights.errors import BalweightsError, DegenerateInputError
from balweights.simulation.dgp import DgpConfig, generate_sample

from oracles import clustered_dataset


def test_ess_examples():
    assert dg.effective_sample_size(np.full(9, 0.3)) == pytest.approx(9.0)
    assert dg.effective_sample_size([0.0, 2.0, 0.0]) == pytest.approx(1.0)
    assert dg.effective_sample_size([0.5, 0.5, 1.0]) == pytest.approx(4 / 1.5)
    with pytest.raises(DegenerateInputError):
        dg.effective_sample_size(np.zeros(4))


def test_ess_per_cluster():
    out = dg.ess_per_cluster([1.0, 1.0, 0.5, 0.5, 1.0], [0, 0, 1, 1, 1])
    assert out == pytest.approx([2.0, 4 / 1.5])


def test_standardized_difference_two_point_data():
    x1 = np.array([1.0, 2.0])
    x0 = np.array([0.0, 1.0])
    # Both variances are 0.5 so the pooled SD is sqrt(0.5); the shift is 1.
    d = dg.standardized_differences(x1, x0)
    assert d.delta[0] == pytest.approx(1.0 / np.sqrt(0.5))


def test_standardized_difference_unit_shift():
    x1 = np.array([[2.0], [0.0]])
    x0 = np.array([[1.0], [-1.0]])
    # Each group has variance 2, so a shift of sqrt(2) is one pooled SD.
    d = dg.standardized_differences(x1 * 1.0, x0 + 1 - np.sqrt(2))
    assert d.delta[0] == pytest.approx(1.0, abs=1e-14)


def test_standardized_difference_identical_groups_and_constant_column():
    rng = np.random.default_rng(0)
    n = 2000
    x1, x0 = rng.standard_normal((n, 3)), rng.standard_normal((n, 3))
    x1[:, 2] = x0[:, 2] = 4.0
    d = dg.standardized_differences(x1, x0)
    assert np.all(np.abs(d.delta[:2]) < 3 / np.sqrt(n))
    assert d.skipped.tolist() == [False, False, True]
    assert d.delta[2] == 0.0 and np.all(np.isfinite(d.delta))


def test_weighted_difference_uses_unweighted_sd():
    x1 = np.array([[1.0], [3.0]])
    x0 = np.array([[0.0], [2.0], [4.0]])
    g = np.array([0.0, 1.0, 1.0])
    d = dg.standardized_differences(x1, x0, g)
    sd = np.sqrt((np.var([1, 3], ddof=1) + np.var([0, 2, 4], ddof=1)) / 2)
    assert d.delta[0] == pytest.approx((2.0 - 3.0) / sd)


def test_pbr_examples():
    base = np.array([0.4, -0.2, 0.1])
    assert dg.pbr(base, np.zeros(3)) == 100.0
    assert dg.pbr(base, base) == 0.0
    assert dg.pbr(base, 2 * base) == pytest.approx(-100.0)
    assert dg.pbr(np.zeros(3), base) == dg.NO_BASELINE_IMBALANCE


def test_pbr_within_clusters_examples():
    before = np.array([[1.0, -1.0], [1.5, 0.5]])
    after = np.array([[0.25, 0.25], [-0.25, 0.25]])
    assert dg.pbr_within_clusters(before, after) == pytest.approx(75.0)
    assert dg.pbr_within_clusters(before, np.zeros_like(before)) == 100.0
    assert dg.pbr_within_clusters(before[:1], after[:1]) == pytest.approx(
        dg.pbr(before[0], after[0]))


def test_rmsi_examples():
    per, overall = dg.rmsi(np.array([[0.3], [0.4]]))
    assert per[0] == pytest.approx(np.sqrt(0.125), abs=1e-12)
    assert round(per[0], 4) == 0.3536
    assert dg.rmsi(np.array([[0.5], [-0.5]]))[0][0] == pytest.approx(0.5)
    assert dg.rmsi(np.zeros((3, 2)))[1] == 0.0
    per, overall = dg.rmsi(np.array([[0.3, 0.0], [0.4, 0.0]]))
    assert overall == pytest.approx(np.sqrt(0.125) / 2)


def test_extrapolation_examples():
    assert dg.extrapolation_percentage([-1.0, 2.0])[0] == pytest.approx(100.0)
    overall, per, _ = dg.extrapolation_percentage([-2.0, 3.0, 0.5, 0.5], [0, 0, 1, 1], 2)
    assert per == pytest.approx([200.0, 0.0])
    assert overall == pytest.approx(100.0 * 2 / 2.0)
    assert dg.extrapolation_percentage([0.2, 0.8])[0] == 0.0


def test_extrapolation_is_zero_for_restricted_weights():
    rng = np.random.default_rng(1)
    ds = clustered_dataset(rng, n=60, p=2, J=2)
    X = ds.covariates
    target = empirical_target(ds, X)
    c = ds.comparison
    w = solve_admm(assemble_problem(X[c], ds.cluster[c], target, 1.0, 'restricted',
                                    'clustered'))
    overall, per, note = dg.extrapolation_percentage(w)
    assert overall == 0.0 and np.all(per == 0) and 'restricted' in note


def test_weight_summary():
    g = np.full(8, 1 / 8)
    s = dg.weight_summary(g, n_focal=4)
    assert s['max_weight_count_scale'] == pytest.approx(0.5)
    assert s['share_below'] == 0.0
    assert s['ess_total'] == pytest.approx(8.0)
    s = dg.weight_summary([0.0, 0.0, 1.0, 0.0], n_focal=150)
    assert s['max_weight_count_scale'] == pytest.approx(150.0)
    assert s['share_below'] == 0.75
    with pytest.raises(BalweightsError):
        dg.weight_summary(np.array([]), n_focal=3)


def test_balance_report_clustered():
    rng = np.random.default_rng(2)
    ds = clustered_dataset(rng, n=150, p=3, J=3)
    design = expand(ds, BasisSpec.raw(ds.covariate_names))
    target = empirical_target(ds, design.matrix)
    c = ds.comparison
    w = solve_admm(assemble_problem(design.matrix[c], ds.cluster[c], target, 0.5,
                                    'unrestricted', 'clustered'))
    rep = dg.balance_report(ds, design, w)
    assert rep.pbr <= 100 and 0 < rep.ess_total <= c.sum()
    assert rep.pbr_h is not None and rep.rmsi_after.shape == (design.matrix.shape[1],)
    rows = rep.rows()
    assert len(rows) == design.matrix.shape[1] * (1 + rep.cluster_present.sum())
    assert rows[0][1] == 'ALL'


def test_sweep_ess_non_decreasing():
    rng = np.random.default_rng(3)
    ds = clustered_dataset(rng, n=200, p=3, J=3)
    X = ds.covariates
    target = empirical_target(ds, X)
    for bounds in ('restricted', 'unrestricted'):
        rows = dg.sweep_lambda(ds, X, target, [0.0, 0.1, 1.0, 10.0, 100.0], bounds)
        assert all(r.status == 'solved' for r in rows)
        ess = [r.ess for r in rows]
        assert all(b >= a - 1e-4 * a for a, b in zip(ess, ess[1:]))


def test_sweep_rejects_unsorted_grid():
    rng = np.random.default_rng(4)
    ds = clustered_dataset(rng, n=60, p=2, J=2)
    with pytest.raises(BalweightsError):
        dg.sweep_lambda(ds, ds.covariates, empirical_target(ds, ds.covariates), [1.0, 0.0])


@pytest.mark.slow
def test_sweep_exact_balance_on_good_overlap():
    ds = generate_sample(DgpConfig(n=1000, c=10.0, seed=0))
    design = expand(ds, BasisSpec.raw(ds.covariate_names))
    target = empirical_target(ds, design.matrix)
    rows = dg.sweep_lambda(ds, design, target, [0.0], 'unrestricted', mode='unclustered')
    assert rows[0].pbr == pytest.approx(100.0, abs=0.5)
