import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from balweights import diagnostics as dg
from balweights import estimators as est
from balweights.data import AnalysisDataset, empirical_target
from balweights.screening import split_sample

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)
positive = st.floats(1e-3, 1e3, allow_nan=False, allow_infinity=False)


def vectors(elements, min_size=2, max_size=40):
    return st.integers(min_size, max_size).flatmap(
        lambda n: arrays(np.float64, n, elements=elements))


@settings(max_examples=50, deadline=None)
@given(n=st.integers(4, 300), fraction=st.floats(0.01, 0.99), seed=st.integers(0, 2 ** 32))
def test_split_is_a_partition(n, fraction, seed):
    k = round(fraction * n)
    assume(0 < k < n)
    ds = AnalysisDataset(group=np.arange(n) % 2, outcomes={'y': np.zeros(n)},
                         covariates=np.zeros((n, 1)), covariate_names=('x',),
                         outcome_name='y')
    screen, analysis = split_sample(ds, fraction, seed)
    a, b = set(screen.row_ids.tolist()), set(analysis.row_ids.tolist())
    assert not a & b and len(a | b) == n and len(a) == k


@given(g=vectors(positive), c=positive)
def test_ess_scale_invariant_and_bounded(g, c):
    e = dg.effective_sample_size(g)
    assert np.isclose(dg.effective_sample_size(c * g), e, rtol=1e-9)
    assert 1 - 1e-9 <= e <= g.size + 1e-9


@settings(deadline=None)
@given(seed=st.integers(0, 2 ** 32), n1=st.integers(2, 30), n0=st.integers(2, 30))
def test_identity_weighting_has_zero_pbr(seed, n1, n0):
    rng = np.random.default_rng(seed)
    x1 = rng.standard_normal((n1, 3)) + 1.0
    x0 = rng.standard_normal((n0, 3))
    before = dg.standardized_differences(x1, x0)
    after = dg.standardized_differences(x1, x0, np.full(n0, 1.0 / n0))
    assert abs(dg.pbr(before, after)) < 1e-9


@given(d=arrays(np.float64, st.tuples(st.integers(1, 10), st.integers(1, 5)),
                elements=st.floats(-10, 10)))
def test_rmsi_dominates_mean(d):
    per, _ = dg.rmsi(d)
    assert np.all(per >= np.abs(d.mean(axis=0)) - 1e-12)


@given(g=vectors(finite))
def test_extrapolation_zero_iff_nonnegative(g):
    assume(g.sum() > 1e-6 and np.abs(g[g < 0]).sum() < 1e300)
    overall, _, _ = dg.extrapolation_percentage(g)
    assert (overall == 0.0) == bool(np.all(g >= 0))


@settings(deadline=None)
@given(seed=st.integers(0, 2 ** 32), J=st.integers(1, 5))
def test_target_is_a_mixture_of_cluster_means(seed, J):
    rng = np.random.default_rng(seed)
    n = 20 * J
    cluster = np.arange(n) % J
    group = np.zeros(n, dtype=int)
    group[rng.permutation(n)[: n // 3]] = 1
    group[:J] = 1
    group[J:2 * J] = 0
    X = rng.standard_normal((n, 2))
    ds = AnalysisDataset(group=group, outcomes={'y': np.zeros(n)}, covariates=X,
                         covariate_names=('a', 'b'), outcome_name='y', cluster=cluster)
    t = empirical_target(ds, X)
    assert np.isclose(t.cluster_mass.sum(), 1.0)
    np.testing.assert_allclose(t.cluster_mass @ t.within_cluster_means, t.overall_mean,
                               atol=1e-12)
    np.testing.assert_allclose(t.overall_mean, X[group == 1].mean(axis=0), atol=1e-12)


@given(g=vectors(positive), c=positive, data=st.data())
def test_weighted_mean_ignores_weight_scale(g, c, data):
    y = data.draw(arrays(np.float64, g.size, elements=finite))
    assert np.isclose(est.weighted_mean(c * g, y), est.weighted_mean(g, y),
                      rtol=1e-9, atol=1e-9)


@given(mu=finite, v1=positive, v0=positive, extra=positive)
def test_interval_contains_point_and_widens(mu, v1, v0, extra):
    a = est.disparity_difference((mu, v1), (0.0, v0))
    b = est.disparity_difference((mu, v1), (0.0, v0 + extra))
    assert a.ci_low <= a.point <= a.ci_high
    assert b.ci_high - b.ci_low > a.ci_high - a.ci_low
