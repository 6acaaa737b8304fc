import numpy as np
import pytest

from balweights.basis import (BasisSpec, Interaction, Raw, Spline, _bspline_columns,
                              evaluate_natural_spline, expand, natural_spline_basis,
                              parse_term)
from balweights.data import AnalysisDataset
from balweights.errors import BasisSpecError, DegenerateInputError

from oracles import cox_de_boor, span_residual, truncated_power_natural_basis


def _dataset(**cols):
    names = tuple(cols)
    X = np.column_stack([np.asarray(v, dtype=float) for v in cols.values()])
    n = X.shape[0]
    return AnalysisDataset(group=np.arange(n) % 2, outcomes={'y': np.zeros(n)},
                           covariates=X, covariate_names=names, outcome_name='y')


def test_parse_terms():
    assert parse_term('age') == Raw('age')
    assert parse_term('spline(age, 8)') == Spline('age', 8)
    assert parse_term('b:a') == Interaction('a', 'b')
    assert Interaction('b', 'a') == Interaction('a', 'b')
    with pytest.raises(BasisSpecError):
        parse_term('spline(age)')


def test_df1_is_linear():
    x = np.random.default_rng(0).random(50)
    B, _ = natural_spline_basis(x, 1)
    assert B.shape == (50, 1)
    assert abs(abs(np.corrcoef(B[:, 0], x)[0, 1]) - 1) < 1e-12


def test_bspline_columns_match_de_boor():
    x = np.linspace(0, 1, 200)
    _, knots = natural_spline_basis(x, 4)
    t = knots.knot_vector()
    probe = np.linspace(0, 1, 20)
    ours = _bspline_columns(probe, t)
    ref = cox_de_boor(probe, t, 3)
    assert np.abs(ours - ref).max() < 1e-10


@pytest.mark.parametrize('df', [2, 4, 8])
def test_natural_basis_spans_truncated_power_space(df):
    x = np.sort(np.random.default_rng(df).random(300))
    B, knots = natural_spline_basis(x, df)
    all_knots = np.concatenate([[knots.boundary[0]], knots.interior, [knots.boundary[1]]])
    T = truncated_power_natural_basis(x, all_knots)
    ours = np.column_stack([np.ones_like(x), B])
    assert ours.shape[1] == T.shape[1]
    assert span_residual(ours, T) < 1e-8
    assert span_residual(T, ours) < 1e-8


def test_linear_beyond_boundary():
    x = np.linspace(0, 1, 100)
    _, knots = natural_spline_basis(x, 5)
    out = evaluate_natural_spline(np.array([1.0, 2.0, 3.0, -1.0, -2.0]), knots)
    np.testing.assert_allclose(out[2] - out[1], out[1] - out[0], atol=1e-12)
    # The right endpoint is evaluated inside the basis, not as zeros.
    assert np.abs(out[0]).max() > 0
    np.testing.assert_allclose(out[4] - out[3], out[3] - evaluate_natural_spline(
        np.array([0.0]), knots)[0], atol=1e-12)


def test_spline_needs_distinct_values():
    with pytest.raises(DegenerateInputError):
        natural_spline_basis(np.ones(30), 3)


def test_permutation_equivariance():
    rng = np.random.default_rng(1)
    x = rng.random(80)
    perm = rng.permutation(80)
    B, _ = natural_spline_basis(x, 4)
    Bp, _ = natural_spline_basis(x[perm], 4)
    np.testing.assert_allclose(Bp, B[perm], atol=1e-13)


def test_interaction_column_is_product():
    ds = _dataset(a=[1, 1, 0, 0], b=[1, 0, 1, 0])
    d = expand(ds, BasisSpec.parse(['a:b']), drop_constant=False)
    np.testing.assert_array_equal(d.matrix[:, 0], [1, 0, 0, 0])


def test_width_arithmetic():
    rng = np.random.default_rng(2)
    cols = {f'v{k}': rng.random(200) for k in range(7)}
    ds = _dataset(**cols)
    pairs = [f'v{a}:v{b}' for a in range(2, 7) for b in range(a + 1, 7)][:10]
    pairs += ['v0:v1', 'v0:v2']
    spec = BasisSpec.parse(['v0', 'v1', 'spline(v2, 8)'] + pairs)
    assert spec.width == 22
    assert expand(ds, spec).p == 22


def test_constant_column_dropped_with_warning(caplog):
    ds = _dataset(a=[1, 2, 3, 4], c=[5, 5, 5, 5])
    with caplog.at_level('WARNING'):
        d = expand(ds, BasisSpec.raw(['a', 'c']))
    assert d.column_names == ('a',)
    assert d.dropped and d.dropped[0][0] == 'c'
    assert 'constant' in caplog.text


def test_unknown_variable():
    ds = _dataset(a=[1, 2, 3])
    with pytest.raises(BasisSpecError, match='nope'):
        expand(ds, BasisSpec.parse(['a:nope']))


def test_expand_is_deterministic():
    rng = np.random.default_rng(4)
    ds = _dataset(a=rng.random(60), b=rng.random(60))
    spec = BasisSpec.parse(['a', 'spline(b, 4)', 'a:b'])
    assert expand(ds, spec).matrix.tobytes() == expand(ds, spec).matrix.tobytes()
