"""Closed-form dual of the unrestricted clustered problem and the ridge OB estimator.

Both use the cluster-blocked design ``Phi`` with ``J (p + 1)`` columns: the
block of cluster ``j`` holds ``(1, phi(Z_i))`` for rows in ``j`` and zeros
elsewhere. ``D`` is the identity on non-intercept columns and ``A`` averages
each non-intercept column across clusters, so ``b'(D - A)b`` is the spread
``sum_j ||beta_j - beta_bar||^2`` of the cluster coefficients around their
mean. Intercepts are not penalized.

The dual coefficients ``eta = (Phi'Phi + lam (D - A))^{-1} phi*`` give the
unrestricted weights ``gamma = Phi eta``. Since the ridge OB coefficients are
``(Phi'Phi + lam (D - A))^{-1} Phi'Y``, ``gamma'Y`` and the ridge OB prediction
``phi*' beta`` coincide exactly.
"""

import dataclasses

import numpy as np
from scipy import linalg

from balweights.data import WeightVector
from balweights.errors import SingularSystemError, ValidationError

_COND_LIMIT = 1e12


@dataclasses.dataclass(frozen=True)
class DualSolution:
    """Dual coefficients per cluster: intercepts ``eta0`` and slopes ``eta``."""

    eta0: np.ndarray
    eta: np.ndarray
    eta_bar: np.ndarray


def blocked_design(phi, cluster, n_clusters):
    """Cluster-blocked design with an intercept per cluster, (n, J (p + 1))."""
    phi = np.asarray(phi, dtype=float)
    n, p = phi.shape
    w = p + 1
    out = np.zeros((n, n_clusters * w))
    cols = cluster[:, None] * w + np.arange(w)[None, :]
    out[np.arange(n)[:, None], cols] = np.hstack([np.ones((n, 1)), phi])
    return out


def pooling_penalty(n_clusters, p):
    """The matrix ``D - A`` on the blocked coefficient vector."""
    w = p + 1
    mask = np.ones(w)
    mask[0] = 0.0
    D = np.kron(np.eye(n_clusters), np.diag(mask))
    A = np.kron(np.full((n_clusters, n_clusters), 1.0 / n_clusters), np.diag(mask))
    return D - A


def target_vector(target):
    """``phi*``: per cluster ``(P_j, P_j E[phi | j])`` stacked."""
    mass = target.cluster_mass
    return np.hstack([mass[:, None], target.scaled_targets]).ravel()


def _check_inputs(phi, cluster, target):
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] == 0:
        raise ValidationError('the comparison group is empty')
    if phi.shape[1] != target.basis_dim:
        raise ValidationError('target and basis have different widths')
    cluster = (np.zeros(phi.shape[0], dtype=np.int64) if cluster is None
               else np.asarray(cluster, dtype=np.int64))
    return phi, cluster


def _solve_pd(M, rhs, what):
    try:
        cf = linalg.cho_factor(M, lower=True, check_finite=False)
    except linalg.LinAlgError:
        raise SingularSystemError(
            f'{what}: the linear system is singular; increase lambda or '
            f'simplify the basis') from None
    d = np.abs(np.diag(cf[0]))
    if d.min() <= 0 or (d.max() / d.min()) ** 2 > _COND_LIMIT:
        raise SingularSystemError(
            f'{what}: the linear system is numerically singular; increase '
            f'lambda or simplify the basis')
    return linalg.cho_solve(cf, rhs, check_finite=False)


def _system(phi, cluster, target, lam):
    J = target.n_clusters
    F = blocked_design(phi, cluster, J)
    M = F.T @ F + lam * pooling_penalty(J, phi.shape[1])
    return F, M


def solve_dual_ridge(phi, cluster, target, lam):
    """Unrestricted clustered weights from the closed-form dual.

    Parameters
    ----------
    phi : (n_comparison, p) basis rows of the comparison group.
    cluster : (n_comparison,) cluster codes.
    target : TargetDistribution.
    lam : positive penalty.

    Returns
    -------
    (WeightVector, DualSolution)
    """
    if not lam > 0:
        raise ValidationError('the dual system needs lambda > 0')
    phi, cluster = _check_inputs(phi, cluster, target)
    F, M = _system(phi, cluster, target, lam)
    eta = _solve_pd(M, target_vector(target), 'dual ridge')
    gamma = F @ eta
    J, w = target.n_clusters, phi.shape[1] + 1
    blocks = eta.reshape(J, w)
    dual = DualSolution(eta0=blocks[:, 0].copy(), eta=blocks[:, 1:].copy(),
                        eta_bar=blocks[:, 1:].mean(axis=0))
    weights = WeightVector(
        weights=gamma, bound_mode='unrestricted', lam=float(lam), cluster=cluster,
        n_clusters=J, method='dual',
        solver_report={'status': 'solved', 'method': 'closed-form dual'})
    return weights, dual


@dataclasses.dataclass(frozen=True)
class RidgeOBFit:
    estimate: float
    intercepts: np.ndarray
    coefs: np.ndarray

    @property
    def coef_mean(self):
        return self.coefs.mean(axis=0)


def regularized_ob(phi, cluster, outcomes, target, lam) -> RidgeOBFit:
    """Partially pooled ridge OB estimate ``sum_j P_j (alpha_j + beta_j . E[phi | j])``.

    Cluster slopes are shrunk toward their common mean with penalty ``lam``;
    intercepts are free.
    """
    if lam < 0:
        raise ValidationError('lambda must be nonnegative')
    phi, cluster = _check_inputs(phi, cluster, target)
    y = np.asarray(outcomes, dtype=float)
    F, M = _system(phi, cluster, target, lam)
    beta = _solve_pd(M, F.T @ y, 'ridge OB' if lam > 0 else
                     'ridge OB with lambda=0 (use lambda > 0)')
    J, w = target.n_clusters, phi.shape[1] + 1
    blocks = beta.reshape(J, w)
    estimate = float(target_vector(target) @ beta)
    return RidgeOBFit(estimate=estimate, intercepts=blocks[:, 0].copy(),
                      coefs=blocks[:, 1:].copy())
