"""Reference implementations used only by the tests.

None of these share code with the package: each one recomputes its answer
from the defining formula with dense linear algebra or brute force.
"""

import itertools

import numpy as np
from scipy import optimize

from balweights.data import AnalysisDataset


# Data -----------------------------------------------------------------------

def clustered_dataset(rng, n=120, p=3, J=3, focal_share=0.4, shift=0.5):
    """Random clustered dataset with every cluster holding both groups."""
    cluster = np.arange(n) % J
    rng.shuffle(cluster)
    group = (rng.random(n) < focal_share).astype(int)
    for j in range(J):
        idx = np.flatnonzero(cluster == j)
        group[idx[0]] = 1
        group[idx[1]] = 0
        group[idx[2]] = 0
    X = rng.standard_normal((n, p)) + shift * group[:, None]
    y = X @ rng.standard_normal(p) + 0.5 * cluster + rng.standard_normal(n)
    return AnalysisDataset(group=group, outcomes={'y': y}, covariates=X,
                           covariate_names=tuple(f'x{k}' for k in range(p)),
                           outcome_name='y', cluster=cluster,
                           cluster_labels=tuple(f'h{j}' for j in range(J)))


def unclustered_dataset(rng, n=100, p=3, shift=0.5):
    group = (rng.random(n) < 0.4).astype(int)
    group[:2] = [1, 0]
    X = rng.standard_normal((n, p)) + shift * group[:, None]
    y = X.sum(axis=1) + rng.standard_normal(n)
    return AnalysisDataset(group=group, outcomes={'y': y}, covariates=X,
                           covariate_names=tuple(f'x{k}' for k in range(p)),
                           outcome_name='y')


# Balancing QP ---------------------------------------------------------------

def dense_objective(phi, cluster, mass, means, lam):
    """``Q`` and ``c`` with objective ``g'Qg - 2c'g + const`` built by loops."""
    n = phi.shape[0]
    Q = np.zeros((n, n))
    for i in range(n):
        for k in range(n):
            if cluster[i] == cluster[k]:
                Q[i, k] = phi[i] @ phi[k]
    Q += lam * np.eye(n)
    c = np.array([phi[i] @ (mass[cluster[i]] * means[cluster[i]]) for i in range(n)])
    return Q, c


def dense_equalities(phi, cluster, mass, overall, clustered):
    n = phi.shape[0]
    if not clustered:
        return np.ones((1, n)), np.ones(1)
    J = mass.size
    M = np.zeros((J, n))
    M[cluster, np.arange(n)] = 1.0
    return np.vstack([M, phi.T]), np.concatenate([mass, overall])


def _kkt_free(Q, c, E, b, free, fixed_value):
    """Minimize over the free coordinates with the others pinned."""
    n = Q.shape[0]
    g = np.array(fixed_value, dtype=float)
    F = np.flatnonzero(free)
    if F.size == 0:
        return g, np.zeros(E.shape[0])
    pinned = ~free
    rhs_b = b - E[:, pinned] @ g[pinned]
    rhs_c = 2 * c[F] - 2 * Q[np.ix_(F, np.flatnonzero(pinned))] @ g[pinned]
    m = E.shape[0]
    K = np.block([[2 * Q[np.ix_(F, F)], E[:, F].T], [E[:, F], np.zeros((m, m))]])
    sol = np.linalg.lstsq(K, np.concatenate([rhs_c, rhs_b]), rcond=None)[0]
    g[F] = sol[:F.size]
    return g, -sol[F.size:]


def equality_qp(Q, c, E, b):
    """Minimizer of ``g'Qg - 2c'g`` subject to ``Eg = b`` (direct KKT solve)."""
    n = Q.shape[0]
    g, _ = _kkt_free(Q, c, E, b, np.ones(n, dtype=bool), np.zeros(n))
    return g


def nonnegative_qp(Q, c, E, b, tol=1e-9):
    """Minimizer with ``g >= 0`` by enumerating which coordinates sit at zero.

    Subsets are visited in order of size; the first one satisfying primal
    feasibility and the multiplier sign conditions is optimal (the problem is
    strictly convex).
    """
    n = Q.shape[0]
    for size in range(n + 1):
        for active in itertools.combinations(range(n), size):
            free = np.ones(n, dtype=bool)
            free[list(active)] = False
            g, nu = _kkt_free(Q, c, E, b, free, np.zeros(n))
            if np.any(g[free] < -tol) or np.abs(E @ g - b).max() > 1e-8:
                continue
            grad = 2 * Q @ g - 2 * c
            # Stationarity on free coordinates and mu >= 0 on active ones.
            mu = grad - E.T @ nu
            if free.any() and np.abs(mu[free]).max() > 1e-7:
                continue
            if size and mu[list(active)].min() < -1e-7:
                continue
            return np.maximum(g, 0.0)
    raise RuntimeError('no active set satisfied the KKT conditions')


def restricted_feasible(problem):
    """Whether some ``g >= 0`` satisfies the equality rows (an LP check)."""
    E, b = problem.full_equality_system()
    if E.shape[0] == 0:
        return True
    res = optimize.linprog(np.zeros(problem.n), A_eq=E.toarray(), b_eq=b,
                           bounds=(0, None), method='highs')
    return res.status == 0


# Splines --------------------------------------------------------------------

def cox_de_boor(x, t, k):
    """All B-spline basis functions of degree ``k`` on knot vector ``t``."""
    x = np.asarray(x, dtype=float)
    m = len(t) - 1
    B = np.zeros((x.size, m))
    for i in range(m):
        B[:, i] = (t[i] <= x) & (x < t[i + 1])
    # Close the last nonempty interval on the right.
    last = max(i for i in range(m) if t[i] < t[i + 1])
    B[x == t[-1], :] = 0.0
    B[x == t[-1], last] = 1.0
    for d in range(1, k + 1):
        nb = np.zeros((x.size, m - d))
        for i in range(m - d):
            left = t[i + d] - t[i]
            right = t[i + d + 1] - t[i + 1]
            a = (x - t[i]) / left * B[:, i] if left > 0 else 0.0
            bb = (t[i + d + 1] - x) / right * B[:, i + 1] if right > 0 else 0.0
            nb[:, i] = a + bb
        B = nb
    return B


def truncated_power_natural_basis(x, knots):
    """Natural cubic spline basis ``1, x, d_k - d_{K-1}`` from truncated powers."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(knots, dtype=float)
    K = xi.size

    def d(k):
        return ((np.maximum(x - xi[k], 0) ** 3 - np.maximum(x - xi[K - 1], 0) ** 3)
                / (xi[K - 1] - xi[k]))

    cols = [np.ones_like(x), x] + [d(k) - d(K - 2) for k in range(K - 2)]
    return np.column_stack(cols)


def span_residual(A, B):
    """Largest residual of projecting the columns of ``B`` onto span(A)."""
    coef = np.linalg.lstsq(A, B, rcond=None)[0]
    return float(np.abs(A @ coef - B).max())


# Logistic regression ---------------------------------------------------------

def logistic_by_quasi_newton(X, y):
    Z = np.hstack([np.ones((X.shape[0], 1)), X])

    def nll(b):
        eta = Z @ b
        return float(np.sum(np.logaddexp(0, eta) - y * eta))

    def grad(b):
        p = 1 / (1 + np.exp(-(Z @ b)))
        return Z.T @ (p - y)

    res = optimize.minimize(nll, np.zeros(Z.shape[1]), jac=grad, method='BFGS',
                            options={'gtol': 1e-11, 'maxiter': 10000})
    return res.x


# HC2 ------------------------------------------------------------------------

def hc2_wls_group_variance(y1, y0, w0):
    """HC2 sandwich variance of the group coefficient in WLS of y on (1, G).

    Focal rows get weight 1, comparison rows ``w0``; computed with full hat
    matrices rather than the closed form.
    """
    n1, n0 = y1.size, y0.size
    y = np.concatenate([y1, y0])
    G = np.concatenate([np.ones(n1), np.zeros(n0)])
    Xd = np.column_stack([np.ones(n1 + n0), G])
    W = np.diag(np.concatenate([np.ones(n1), w0]))
    bread = np.linalg.inv(Xd.T @ W @ Xd)
    beta = bread @ Xd.T @ W @ y
    e = y - Xd @ beta
    H = Xd @ bread @ Xd.T @ W
    h = np.diag(H)
    meat = Xd.T @ W @ np.diag(e ** 2 / (1 - h)) @ W @ Xd
    V = bread @ meat @ bread
    return float(V[1, 1])
