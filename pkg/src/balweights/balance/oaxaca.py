"""Plain Oaxaca-Blinder estimator and its design-conditional MSE."""

import dataclasses

import numpy as np

from balweights.errors import SingularSystemError, ValidationError


@dataclasses.dataclass(frozen=True)
class OBEstimate:
    """OLS fit on one group and its prediction at a target covariate mean.

    ``weights`` are the implied linear weights, so that
    ``estimate == weights @ y``.
    """

    estimate: float
    intercept: float
    coef: np.ndarray
    weights: np.ndarray


def _design(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    return X


def ob_estimate(X, y, target_mean) -> OBEstimate:
    """Fit ``y ~ 1 + X`` by OLS and predict at ``target_mean``.

    The implied weights are ``1/n + (X_i - Xbar)' S^{-1} (target_mean - Xbar)``
    with ``S`` the centered cross-product matrix.
    """
    X = _design(X)
    y = np.asarray(y, dtype=float)
    t = np.atleast_1d(np.asarray(target_mean, dtype=float))
    n, d = X.shape
    if t.shape != (d,):
        raise ValidationError('target mean has the wrong length')
    Xt = np.hstack([np.ones((n, 1)), X])
    if n < d + 1 or np.linalg.matrix_rank(Xt) < d + 1:
        raise SingularSystemError('Oaxaca-Blinder design is rank deficient')
    coef, *_ = np.linalg.lstsq(Xt, y, rcond=None)
    xbar = X.mean(axis=0)
    Xc = X - xbar
    S = Xc.T @ Xc
    w = 1.0 / n + Xc @ np.linalg.solve(S, t - xbar)
    return OBEstimate(estimate=float(coef[0] + coef[1:] @ t), intercept=float(coef[0]),
                      coef=coef[1:], weights=w)


@dataclasses.dataclass(frozen=True)
class OBMseDecomposition:
    estimation_error: float
    approximation_error: float
    d_eff: float

    @property
    def total_mse(self):
        return self.estimation_error + self.approximation_error

    def as_dict(self):
        return {'estimation_error': self.estimation_error,
                'approximation_error': self.approximation_error,
                'd_eff': self.d_eff, 'total_mse': self.total_mse}


def ob_mse_decomposition(X, m, sigma2, target_points) -> OBMseDecomposition:
    """Design-conditional MSE of :func:`ob_estimate` for a known truth.

    Parameters
    ----------
    X : (n, d) covariates of the group being modelled.
    m : callable mapping an (k, d) array to the (k,) true conditional means.
    sigma2 : noise variance (homoskedastic).
    target_points : (k, d) covariate rows whose empirical distribution is the
        target; the estimand is the mean of ``m`` over them.

    Notes
    -----
    Covariates are centered at the group mean before forming the moments, and
    the target points are shifted by the same amount.
    """
    if sigma2 < 0:
        raise ValidationError('sigma2 must be nonnegative')
    X = _design(X)
    T = _design(target_points)
    n = X.shape[0]
    xbar = X.mean(axis=0)
    Xc = X - xbar
    mx = np.asarray(m(X), dtype=float)
    m_bar = mx.mean()
    Sigma = Xc.T @ Xc / n
    rho = Xc.T @ (mx - m_bar) / n
    ex = (T - xbar).mean(axis=0)
    try:
        a = np.linalg.solve(Sigma, ex)
    except np.linalg.LinAlgError:
        raise SingularSystemError('covariate second-moment matrix is singular') from None
    if np.linalg.cond(Sigma) > 1e12:
        raise SingularSystemError('covariate second-moment matrix is singular')
    d_eff = 1.0 + float(np.mean((Xc @ a) ** 2))
    target_m = float(np.mean(m(T)))
    approx = (float(a @ rho) - (target_m - m_bar)) ** 2
    return OBMseDecomposition(estimation_error=d_eff * sigma2 / n,
                              approximation_error=approx, d_eff=d_eff)
