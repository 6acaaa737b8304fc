"""The balancing-weights quadratic program.

With comparison rows ``i`` in clusters ``j`` the weights minimize

    sum_j || sum_{i in j} g_i phi(Z_i) - P*(H=j) E*[phi | H=j] ||^2 + lam * sum_i g_i^2

In clustered mode the weights also satisfy exact global balance
``sum_i g_i phi(Z_i) = E*[phi]`` and per-cluster mass ``sum_{i in j} g_i =
P*(H=j)``. In unclustered mode balance enters only through the objective and
the weights are normalized to sum to one. Restricted weights are nonnegative;
unrestricted weights are free.

The solver works on a lifted form with one residual variable ``r_j`` per
cluster and basis column, which keeps every matrix block-sparse:

    minimize   lam ||g||^2 + ||r||^2
    subject to Phi_j' g_j - r_j = phi*_j       (definition rows)
               equality rows on g, box rows on g
"""

import dataclasses
from typing import Optional

import numpy as np
import scipy.sparse as sp

from balweights.balance.admm import SolverSettings, solve_qp
from balweights.data import WeightVector
from balweights.errors import NoOverlapError, ValidationError

BOUND_MODES = ('restricted', 'unrestricted')
MODES = ('clustered', 'unclustered')


@dataclasses.dataclass(eq=False)
class BalanceProblem:
    """Data of one balancing QP over the comparison-row weights.

    ``phi`` holds the basis rows of the comparison units, ``cluster`` their
    cluster codes and ``targets`` the scaled target moments, one row per
    cluster. ``eq_matrix`` / ``eq_rhs`` carry the equality system on the
    weights (global balance and cluster mass rows).
    """

    phi: np.ndarray
    cluster: np.ndarray
    targets: np.ndarray
    lam: float
    lower: np.ndarray
    upper: np.ndarray
    eq_matrix: sp.csr_matrix
    eq_rhs: np.ndarray
    eq_labels: tuple = ()
    sum_to_one: bool = False
    mode: str = 'clustered'
    bound_mode: str = 'restricted'

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=float)
        n = self.phi.shape[0]
        self.cluster = np.asarray(self.cluster, dtype=np.int64)
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=float))
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (n,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (n,)).copy()
        self.eq_matrix = sp.csr_matrix(self.eq_matrix, shape=(len(self.eq_rhs), n))
        self.eq_rhs = np.asarray(self.eq_rhs, dtype=float)
        if self.lam < 0:
            raise ValidationError(f'lambda must be nonnegative, got {self.lam}')
        if n == 0:
            raise ValidationError('the comparison group is empty')
        if self.cluster.shape != (n,):
            raise ValidationError('cluster codes must align with basis rows')
        if self.targets.shape[1] != self.phi.shape[1]:
            raise ValidationError('targets and basis have different widths')

    @property
    def n(self):
        return self.phi.shape[0]

    @property
    def p(self):
        return self.phi.shape[1]

    @property
    def n_clusters(self):
        return self.targets.shape[0]

    @property
    def n_equality_rows(self):
        return self.eq_matrix.shape[0]

    def full_equality_system(self):
        """Equality rows including the sum-to-one row when present."""
        E, b = self.eq_matrix, self.eq_rhs
        if self.sum_to_one:
            E = sp.vstack([E, sp.csr_matrix(np.ones((1, self.n)))], format='csr')
            b = np.append(b, 1.0)
        return E, b

    def cluster_sums(self, gamma):
        """``sum_{i in j} g_i phi(Z_i)`` for every cluster, shape (J, p)."""
        out = np.zeros((self.n_clusters, self.p))
        np.add.at(out, self.cluster, gamma[:, None] * self.phi)
        return out

    def imbalance(self, gamma):
        """First term of the objective: summed squared within-cluster imbalance."""
        r = self.cluster_sums(np.asarray(gamma, dtype=float)) - self.targets
        return float((r ** 2).sum())

    def objective(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        return self.imbalance(gamma) + self.lam * float(gamma @ gamma)

    def gradient(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        r = self.cluster_sums(gamma) - self.targets
        return 2.0 * ((self.phi * r[self.cluster]).sum(axis=1) + self.lam * gamma)

    def quadratic_term(self):
        """Sparse Gram matrix ``Q`` with objective ``g'Qg - 2 c'g + const``."""
        blocks = []
        order = np.argsort(self.cluster, kind='stable')
        for j in range(self.n_clusters):
            idx = order[self.cluster[order] == j]
            F = self.phi[idx]
            blocks.append(F @ F.T)
        Q = sp.block_diag(blocks, format='csr') if blocks else sp.csr_matrix((0, 0))
        # Return to original row order.
        inv = np.empty_like(order)
        inv[order] = np.arange(order.size)
        Q = Q[inv][:, inv]
        return sp.csr_matrix(Q + self.lam * sp.eye(self.n))

    def linear_term(self):
        """Vector ``c`` with ``c_i = phi(Z_i) . phi*_{j(i)}``."""
        return (self.phi * self.targets[self.cluster]).sum(axis=1)

    def to_qp(self):
        """OSQP-form data ``(P, q, A, l, u)`` of the lifted problem."""
        n, p, J = self.n, self.p, self.n_clusters
        nr = J * p
        P = sp.diags(np.concatenate([np.full(n, 2.0 * self.lam), np.full(nr, 2.0)]),
                     format='csc')
        q = np.zeros(n + nr)
        rows = (self.cluster[:, None] * p + np.arange(p)[None, :]).ravel()
        cols = np.repeat(np.arange(n), p)
        Dg = sp.csr_matrix((self.phi.ravel(), (rows, cols)), shape=(nr, n))
        blocks = [[Dg, -sp.eye(nr)]]
        lo = [self.targets.ravel()]
        hi = [self.targets.ravel()]
        E, b = self.full_equality_system()
        if E.shape[0]:
            blocks.append([E, None])
            lo.append(b)
            hi.append(b)
        finite = np.isfinite(self.lower) | np.isfinite(self.upper)
        if finite.any():
            idx = np.flatnonzero(finite)
            S = sp.csr_matrix((np.ones(idx.size), (np.arange(idx.size), idx)),
                              shape=(idx.size, n))
            blocks.append([S, None])
            lo.append(self.lower[idx])
            hi.append(self.upper[idx])
        A = sp.bmat(blocks, format='csc')
        if A.shape[1] != n + nr:
            A = sp.hstack([A, sp.csc_matrix((A.shape[0], n + nr - A.shape[1]))])
        return P, q, A, np.concatenate(lo), np.concatenate(hi)


def _bounds(bound_mode, n):
    if bound_mode == 'restricted':
        return np.zeros(n), np.full(n, np.inf)
    if bound_mode == 'unrestricted':
        return np.full(n, -np.inf), np.full(n, np.inf)
    raise ValidationError(f'unknown bound mode {bound_mode!r}')


def assemble_problem(phi, cluster, target, lam, bounds='restricted',
                     mode='clustered') -> BalanceProblem:
    """Build the QP for comparison rows ``phi`` against ``target``.

    Parameters
    ----------
    phi : (n_comparison, p) basis rows of the comparison group.
    cluster : (n_comparison,) cluster codes, or None in unclustered mode.
    target : TargetDistribution on the same basis.
    lam : nonnegative ridge penalty on the weights.
    bounds : ``'restricted'`` (g >= 0) or ``'unrestricted'``.
    mode : ``'clustered'`` or ``'unclustered'``.
    """
    if lam < 0 or not np.isfinite(lam):
        raise ValidationError(f'lambda must be finite and nonnegative, got {lam}')
    if mode not in MODES:
        raise ValidationError(f'unknown mode {mode!r}')
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 2 or phi.shape[0] == 0:
        raise ValidationError('the comparison group is empty')
    n, p = phi.shape
    if p != target.basis_dim:
        raise ValidationError('target and basis have different widths')
    lower, upper = _bounds(bounds, n)
    if mode == 'unclustered':
        return BalanceProblem(
            phi=phi, cluster=np.zeros(n, dtype=np.int64),
            targets=target.overall_mean[None, :], lam=float(lam),
            lower=lower, upper=upper,
            eq_matrix=sp.csr_matrix((0, n)), eq_rhs=np.zeros(0),
            sum_to_one=True, mode=mode, bound_mode=bounds)

    if cluster is None:
        raise ValidationError('clustered mode needs cluster codes')
    cluster = np.asarray(cluster, dtype=np.int64)
    J = target.n_clusters
    counts = np.bincount(cluster, minlength=J)
    if counts.shape[0] > J:
        raise ValidationError('cluster codes exceed the target clusters')
    mass = target.cluster_mass
    missing = np.flatnonzero((counts == 0) & (mass > 0))
    if missing.size:
        raise NoOverlapError([target.cluster_labels[j] for j in missing])
    M = sp.csr_matrix((np.ones(n), (cluster, np.arange(n))), shape=(J, n))
    G = sp.csr_matrix(phi.T)
    eq = sp.vstack([M, G], format='csr')
    rhs = np.concatenate([mass, target.overall_mean])
    labels = tuple([f'mass[{target.cluster_labels[j]}]' for j in range(J)]
                   + [f'balance[{k}]' for k in range(p)])
    return BalanceProblem(
        phi=phi, cluster=cluster, targets=target.scaled_targets, lam=float(lam),
        lower=lower, upper=upper, eq_matrix=eq, eq_rhs=rhs, eq_labels=labels,
        sum_to_one=False, mode=mode, bound_mode=bounds)


@dataclasses.dataclass
class KKTCertificate:
    """Residuals of the optimality conditions at a candidate point."""

    stationarity: float
    primal: float
    dual_sign: float
    complementarity: float
    n_active: int

    def max(self):
        return max(self.stationarity, self.primal, self.dual_sign,
                   self.complementarity)

    def as_dict(self):
        return dataclasses.asdict(self)


def kkt_certificate(problem: BalanceProblem, gamma, active_tol=1e-9) -> KKTCertificate:
    """Check optimality of ``gamma`` from first principles.

    The active set is read off ``gamma`` itself (coordinates within
    ``active_tol`` of a finite bound). Equality multipliers are recovered by
    least squares on the free coordinates; bound multipliers then follow from
    the gradient on the active coordinates and must carry the right sign.
    """
    gamma = np.asarray(gamma, dtype=float)
    g = problem.gradient(gamma)
    E, b = problem.full_equality_system()
    E = E.toarray()
    low = np.isfinite(problem.lower) & (gamma - problem.lower <= active_tol)
    upp = np.isfinite(problem.upper) & (problem.upper - gamma <= active_tol) & ~low
    free = ~(low | upp)
    if E.shape[0]:
        nu = np.linalg.lstsq(E[:, free].T, -g[free], rcond=None)[0] if free.any() \
            else np.zeros(E.shape[0])
        full = g + E.T @ nu
        primal = float(np.abs(E @ gamma - b).max())
    else:
        full = g
        primal = 0.0
    bound_violation = max(
        float(np.max(problem.lower - gamma, initial=0.0)),
        float(np.max(gamma - problem.upper, initial=0.0)))
    primal = max(primal, bound_violation)
    stationarity = float(np.abs(full[free]).max()) if free.any() else 0.0
    # At a lower bound the gradient multiplier must be >= 0, at an upper <= 0.
    sign = max(float(np.max(-full[low], initial=0.0)),
               float(np.max(full[upp], initial=0.0)))
    slack = np.where(low, gamma - problem.lower,
                     np.where(upp, problem.upper - gamma, 0.0))
    comp = float(np.max(np.abs(full * np.where(low | upp, slack, 0.0)), initial=0.0))
    return KKTCertificate(stationarity=stationarity, primal=primal,
                          dual_sign=sign, complementarity=comp,
                          n_active=int(low.sum() + upp.sum()))


def solve_admm(problem: BalanceProblem, settings: Optional[SolverSettings] = None,
               warm_start=None) -> WeightVector:
    """Solve a :class:`BalanceProblem` with the ADMM kernel.

    ``warm_start`` may be a previous :class:`WeightVector` for a problem with
    the same constraints (e.g. the neighbouring lambda on a grid).
    """
    settings = settings or SolverSettings()
    P, q, A, l, u = problem.to_qp()
    state = None
    if warm_start is not None and warm_start.solver_state is not None:
        x0, y0, z0 = warm_start.solver_state
        if x0.shape[0] == P.shape[0] and y0.shape[0] == A.shape[0]:
            state = (x0, y0, z0)
    res = solve_qp(P, q, A, l, u, settings=settings, warm_start=state)
    gamma = res.x[:problem.n].copy()
    # Remove solver-tolerance violations of the box.
    gamma = np.clip(gamma, problem.lower, problem.upper)
    report = res.report()
    report['objective'] = problem.objective(gamma)
    report['imbalance'] = problem.imbalance(gamma)
    cert = kkt_certificate(problem, gamma)
    report['kkt'] = cert.as_dict()
    report['kkt_max'] = cert.max()
    if problem.lam == 0 and problem.bound_mode == 'restricted':
        report['note'] = ('lambda=0 with bounds: the objective is not strictly '
                          'convex, weights may be non-unique')
    return WeightVector(
        weights=gamma, bound_mode=problem.bound_mode, lam=problem.lam,
        cluster=problem.cluster if problem.mode == 'clustered' else None,
        n_clusters=problem.n_clusters, solver_report=report,
        method='balancing', solver_state=(res.x, res.y, res.z))


def bias_decomposition(problem: BalanceProblem, gamma, cluster_intercepts, cluster_coefs):
    """Three-term bias of a weighting estimator under a cluster-interacted linear truth.

    With truth ``m(X) = alpha_j + beta_j . phi(Z)`` and ``beta_bar`` the mean of
    the ``beta_j``, the bias ``sum_i g_i m(X_i) - E*[m]`` splits into

    * ``mass``: sum_j alpha_j (sum_{i in j} g_i - P*_j)
    * ``global``: beta_bar . (sum_i g_i phi_i - E*[phi])
    * ``within``: sum_j (beta_j - beta_bar) . (sum_{i in j} g_i phi_i - phi*_j)

    Returns a dict with the three terms, their sum and the direct difference.
    """
    gamma = np.asarray(gamma, dtype=float)
    alpha = np.asarray(cluster_intercepts, dtype=float)
    beta = np.atleast_2d(np.asarray(cluster_coefs, dtype=float))
    beta_bar = beta.mean(axis=0)
    sums = problem.cluster_sums(gamma)
    cl_mass = np.bincount(problem.cluster, weights=gamma, minlength=problem.n_clusters)
    # phi*_j = P_j * E[phi|j]; recover P_j from the mass equality rhs when available.
    mass = _target_mass(problem)
    mass_term = float(alpha @ (cl_mass - mass))
    global_term = float(beta_bar @ (sums.sum(axis=0) - problem.targets.sum(axis=0)))
    within_term = float(((beta - beta_bar) * (sums - problem.targets)).sum())
    m_i = alpha[problem.cluster] + (beta[problem.cluster] * problem.phi).sum(axis=1)
    target_m = float(alpha @ mass + (beta * problem.targets).sum())
    direct = float(gamma @ m_i) - target_m
    return {'mass': mass_term, 'global': global_term, 'within': within_term,
            'total': mass_term + global_term + within_term, 'direct': direct}


def _target_mass(problem):
    if problem.mode == 'unclustered':
        return np.ones(1)
    return problem.eq_rhs[:problem.n_clusters]
