"""Point estimates, variances and confidence intervals for weighted disparities.

All variance formulas work with Hajek-normalized weights (summing to one),
whatever the scale the weights arrive on.
"""

import dataclasses
from typing import Optional

import numpy as np
from scipy import stats

from balweights.errors import DegenerateInputError, SingularSystemError, ValidationError

SCALES = ('difference', 'risk_ratio')


def _as_weights(weights):
    return np.asarray(getattr(weights, 'weights', weights), dtype=float)


def normalized(weights):
    """Weights divided by their sum; raises on a zero total."""
    w = _as_weights(weights)
    if w.size == 0:
        raise ValidationError('empty weight vector')
    total = w.sum()
    if not np.isfinite(total) or abs(total) < 1e-300 or not np.any(w):
        raise DegenerateInputError('weights sum to zero')
    return w / total


def focal_mean_var(y):
    """Mean of the focal outcomes and the variance ``(1/n^2) sum (y - ybar)^2``."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if n < 2:
        raise DegenerateInputError('focal variance needs at least two rows')
    mu = float(y.mean())
    return mu, float(((y - mu) ** 2).sum() / n ** 2)


def weighted_mean(weights, y):
    """Hajek weighted mean ``sum g y / sum g``."""
    w = normalized(weights)
    y = np.asarray(y, dtype=float)
    if y.shape != w.shape:
        raise ValidationError('weights and outcomes differ in length')
    return float(w @ y)


@dataclasses.dataclass(frozen=True)
class OutcomeModelFit:
    """Cluster-interacted weighted ridge fit on the comparison rows.

    Coefficients refer to the standardized basis ``(phi - center) / scale``.
    """

    intercepts: np.ndarray
    coefs: np.ndarray
    center: np.ndarray
    scale: np.ndarray
    ridge_penalty: float
    fitted: np.ndarray
    n_clipped: int
    unweighted_clusters: tuple = ()

    def predict(self, phi, cluster=None):
        phi = np.asarray(phi, dtype=float)
        cluster = (np.zeros(phi.shape[0], dtype=np.int64) if cluster is None
                   else np.asarray(cluster, dtype=np.int64))
        Z = (phi - self.center) / self.scale
        return self.intercepts[cluster] + (Z * self.coefs[cluster]).sum(axis=1)

    def report(self):
        return {'ridge_penalty': self.ridge_penalty,
                'negative_weights_clipped': self.n_clipped,
                'clusters_without_positive_weight': list(self.unweighted_clusters)}


def fit_outcome_model(phi, y, weights, cluster=None, n_clusters=None,
                      ridge_penalty=1.0) -> OutcomeModelFit:
    """Weighted ridge regression of ``y`` on ``phi`` separately within clusters.

    Fit weights are ``max(gamma, 0)``. Columns are standardized with the
    unweighted comparison-row mean and standard deviation; intercepts are not
    penalized. A cluster without positive weight gets its unweighted outcome
    mean as intercept and zero slopes.
    """
    if not ridge_penalty > 0:
        raise ValidationError('ridge_penalty must be positive')
    phi = np.asarray(phi, dtype=float)
    if phi.ndim == 1:
        phi = phi[:, None]
    y = np.asarray(y, dtype=float)
    g = _as_weights(weights)
    n, p = phi.shape
    if y.shape != (n,) or g.shape != (n,):
        raise ValidationError('design, outcomes and weights differ in length')
    cluster = (np.zeros(n, dtype=np.int64) if cluster is None
               else np.asarray(cluster, dtype=np.int64))
    J = int(n_clusters or (cluster.max() + 1 if n else 1))
    center = phi.mean(axis=0) if n else np.zeros(p)
    scale = phi.std(axis=0) if n else np.ones(p)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (phi - center) / scale
    w = np.maximum(g, 0.0)
    intercepts = np.zeros(J)
    coefs = np.zeros((J, p))
    empty = []
    for j in range(J):
        idx = np.flatnonzero(cluster == j)
        if idx.size == 0:
            continue
        wj = w[idx]
        if wj.sum() <= 0:
            intercepts[j] = y[idx].mean()
            empty.append(j)
            continue
        zbar = wj @ Z[idx] / wj.sum()
        ybar = wj @ y[idx] / wj.sum()
        Zc = Z[idx] - zbar
        lhs = Zc.T @ (wj[:, None] * Zc) + ridge_penalty * np.eye(p)
        beta = np.linalg.solve(lhs, Zc.T @ (wj * (y[idx] - ybar)))
        coefs[j] = beta
        intercepts[j] = ybar - zbar @ beta
    fitted = intercepts[cluster] + (Z * coefs[cluster]).sum(axis=1)
    return OutcomeModelFit(intercepts=intercepts, coefs=coefs, center=center,
                           scale=scale, ridge_penalty=float(ridge_penalty),
                           fitted=fitted, n_clipped=int((g < 0).sum()),
                           unweighted_clusters=tuple(empty))


def rve_variance(weights, y, fit):
    """Residualized variance ``sum g^2 (y - m_hat)^2`` with Hajek weights.

    ``fit`` is an :class:`OutcomeModelFit` or an array of fitted values.
    """
    w = normalized(weights)
    y = np.asarray(y, dtype=float)
    fitted = np.asarray(getattr(fit, 'fitted', fit), dtype=float)
    if y.shape != w.shape or fitted.shape != w.shape:
        raise ValidationError('weights, outcomes and fitted values differ in length')
    return float((w ** 2 * (y - fitted) ** 2).sum())


def hc2_variance(weights, y_focal, y_comparison):
    """HC2 variance of the group coefficient in WLS of ``y`` on ``(1, G)``.

    Focal rows carry weight one and comparison rows their (Hajek) weight. The
    design is saturated, so the leverage of row ``i`` is its weight share in
    its own group and the sandwich separates into one term per group.

    Returns
    -------
    (v_focal, v_comparison)
    """
    y1 = np.asarray(y_focal, dtype=float)
    y0 = np.asarray(y_comparison, dtype=float)
    w0 = normalized(weights)
    if w0.shape != y0.shape:
        raise ValidationError('weights and comparison outcomes differ in length')
    n1 = y1.size
    if n1 < 2:
        raise DegenerateInputError('HC2 needs at least two focal rows')
    e1 = y1 - y1.mean()
    e0 = y0 - w0 @ y0
    h1 = 1.0 / n1
    h0 = w0
    if np.any(np.isclose(h0, 1.0, rtol=0, atol=1e-12) & (w0 != 0)):
        raise SingularSystemError(
            'leverage 1: a single comparison unit carries the whole weight')
    v1 = float((h1 ** 2 * e1 ** 2 / (1.0 - h1)).sum())
    v0 = float((w0 ** 2 * e0 ** 2 / (1.0 - h0)).sum())
    return v1, v0


@dataclasses.dataclass(frozen=True)
class DisparityEstimate:
    mu_focal: float
    mu_comparison: float
    v_focal: float
    v_comparison: float
    scale: str
    point: float
    ci_low: float
    ci_high: float
    alpha: float = 0.05

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ValueError(f'unknown scale {self.scale!r}')

    @property
    def variance(self):
        """Variance on the scale the interval is built on (log for ratios)."""
        if self.scale == 'difference':
            return self.v_focal + self.v_comparison
        return (self.v_focal / self.mu_focal ** 2
                + self.v_comparison / self.mu_comparison ** 2)

    @property
    def se(self):
        return float(np.sqrt(self.variance))

    def covers(self, value):
        return self.ci_low <= value <= self.ci_high


def z_value(alpha):
    if not 0 < alpha < 1:
        raise ValidationError('alpha must lie in (0, 1)')
    return float(stats.norm.ppf(1.0 - alpha / 2.0))


def disparity_difference(est_focal, est_comparison, alpha=0.05) -> DisparityEstimate:
    """``mu_1 - mu_0`` with a normal interval; estimates are ``(mean, variance)``."""
    (mu1, v1), (mu0, v0) = est_focal, est_comparison
    if v1 < 0 or v0 < 0:
        raise ValidationError('variances must be nonnegative')
    point = mu1 - mu0
    half = z_value(alpha) * np.sqrt(v1 + v0)
    return DisparityEstimate(mu1, mu0, v1, v0, 'difference', point,
                             point - half, point + half, alpha)


def disparity_risk_ratio(est_focal, est_comparison, alpha=0.05) -> DisparityEstimate:
    """``mu_1 / mu_0`` with a delta-method interval on the log scale."""
    (mu1, v1), (mu0, v0) = est_focal, est_comparison
    if not (mu1 > 0 and mu0 > 0):
        raise ValidationError('the risk ratio needs positive group means')
    if v1 < 0 or v0 < 0:
        raise ValidationError('variances must be nonnegative')
    point = mu1 / mu0
    v_log = v1 / mu1 ** 2 + v0 / mu0 ** 2
    half = z_value(alpha) * np.sqrt(v_log)
    return DisparityEstimate(mu1, mu0, v1, v0, 'risk_ratio', point,
                             float(np.exp(np.log(point) - half)),
                             float(np.exp(np.log(point) + half)), alpha)


def estimate_disparity(y_focal, y_comparison, weights, scale='difference',
                       se_method='rve', fit: Optional[OutcomeModelFit] = None,
                       alpha=0.05) -> DisparityEstimate:
    """Convenience wrapper: means, the chosen variance and the interval."""
    mu1, v1 = focal_mean_var(y_focal)
    mu0 = weighted_mean(weights, y_comparison)
    if se_method == 'rve':
        if fit is None:
            raise ValidationError('RVE needs an outcome model fit')
        v0 = rve_variance(weights, y_comparison, fit)
    elif se_method == 'hc2':
        v1, v0 = hc2_variance(weights, y_focal, y_comparison)
    else:
        raise ValidationError(f'unknown se_method {se_method!r}')
    if scale == 'difference':
        return disparity_difference((mu1, v1), (mu0, v0), alpha)
    if scale == 'risk_ratio':
        return disparity_risk_ratio((mu1, v1), (mu0, v0), alpha)
    raise ValidationError(f'unknown scale {scale!r}')
