"""Inverse propensity weights from a logistic regression fit by IRLS."""

import dataclasses

import numpy as np
from scipy import special

from balweights.data import WeightVector
from balweights.errors import ConvergenceError, SeparationError, ValidationError

_COEF_LIMIT = 1e3
_PERFECT_FIT = 1e-6


@dataclasses.dataclass(frozen=True)
class LogisticFit:
    coef: np.ndarray
    iterations: int
    loglik: float
    converged: bool
    trace: tuple

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return special.expit(self.coef[0] + X @ self.coef[1:])


def _loglik(eta, y):
    # log p = -log(1 + e^-eta), log(1 - p) = -log(1 + e^eta)
    return float(-(y * np.logaddexp(0.0, -eta) + (1 - y) * np.logaddexp(0.0, eta)).sum())


def fit_logistic(X, y, tol=1e-10, max_iter=100) -> LogisticFit:
    """Logistic regression of ``y`` on ``(1, X)`` by Newton steps with step-halving.

    Converges when the largest coefficient change drops below ``tol``.

    Raises
    ------
    SeparationError
        If the coefficients diverge or the fit predicts the groups perfectly.
    ConvergenceError
        If ``max_iter`` Newton steps do not converge; carries the trace of
        ``(iteration, loglik, step_size, max_change)``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if not (0 < y.sum() < n):
        raise ValidationError('logistic fit needs both groups present')
    Z = np.hstack([np.ones((n, 1)), X])
    beta = np.zeros(Z.shape[1])
    eta = Z @ beta
    ll = _loglik(eta, y)
    trace = []
    for it in range(1, max_iter + 1):
        p = special.expit(eta)
        w = p * (1.0 - p)
        H = Z.T @ (w[:, None] * Z)
        grad = Z.T @ (y - p)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta + t * step
            eta_c = Z @ cand
            ll_c = _loglik(eta_c, y)
            if ll_c >= ll - 1e-12 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        change = float(np.abs(cand - beta).max())
        beta, eta, ll = cand, eta_c, ll_c
        trace.append((it, ll, t, change))
        if np.abs(beta).max() > _COEF_LIMIT:
            raise SeparationError(
                'nonoverlap/separation: logistic coefficients diverge '
                f'(max |coef| = {np.abs(beta).max():.3g} after {it} iterations)')
        if np.abs(y - special.expit(eta)).max() < _PERFECT_FIT:
            raise SeparationError('nonoverlap/separation: the covariates predict '
                                  'group membership perfectly')
        if change < tol:
            return LogisticFit(coef=beta, iterations=it, loglik=ll, converged=True,
                               trace=tuple(trace))
    raise ConvergenceError(f'logistic IRLS did not converge in {max_iter} iterations',
                           trace=trace)


def fit_ipw_logistic(dataset, tol=1e-10, max_iter=100):
    """Odds weights ``e / (1 - e)`` for the comparison rows, normalized to one.

    Returns ``(WeightVector, LogisticFit)``.
    """
    if dataset.n_focal == 0 or dataset.n_comparison == 0:
        raise ValidationError('IPW needs both groups present')
    fit = fit_logistic(dataset.covariates, dataset.group, tol=tol, max_iter=max_iter)
    Xc = dataset.covariates[dataset.comparison]
    eta = fit.coef[0] + Xc @ fit.coef[1:]
    # e / (1 - e) = exp(eta); shift before exponentiating since we normalize.
    odds = np.exp(eta - eta.max())
    w = odds / odds.sum()
    return WeightVector(weights=w, bound_mode='restricted', lam=0.0, method='ipw',
                        solver_report={'status': 'solved',
                                       'iterations': fit.iterations,
                                       'loglik': fit.loglik}), fit
