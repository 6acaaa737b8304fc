"""Operator-splitting (ADMM) solver for convex quadratic programs.

Solves

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

with the splitting used by OSQP: at each iteration a quasi-definite KKT system
is solved with a cached sparse factorization, the auxiliary variable is
projected onto [l, u] and the duals take a relaxed ascent step. The data are
Ruiz-equilibrated first, the step size rho adapts to balance the primal and
dual residuals, and a final polish step re-solves the equality system implied
by the detected active set.

This is a kernel for :mod:`balweights.balance.problem`; it is not meant as a
general purpose QP interface.
"""

import dataclasses
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

logger = logging.getLogger(__name__)

_RHO_MIN = 1e-6
_RHO_MAX = 1e6
_RHO_EQ_SCALE = 1e3
_SCALE_MIN = 1e-4
_SCALE_MAX = 1e4


@dataclasses.dataclass(frozen=True)
class SolverSettings:
    """Tuning knobs for :func:`solve_qp`.

    ``alpha`` is the over-relaxation parameter (1 disables relaxation).
    Termination uses ``eps_abs + eps_rel * scale`` on the infinity norms of the
    primal residual ``Ax - z`` and the dual residual ``Px + q + A'y``.
    """

    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    eps_infeasible: float = 1e-6
    max_iter: int = 20000
    polish: bool = True
    adaptive_rho: bool = True
    adaptive_rho_interval: int = 25
    adaptive_rho_tolerance: float = 5.0
    scaling_iters: int = 10
    check_interval: int = 5
    polish_delta: float = 1e-7
    polish_refine_iter: int = 30
    polish_rounds: int = 25
    polish_interval: int = 100

    def __post_init__(self):
        for name in ('rho', 'sigma', 'eps_abs', 'eps_rel', 'eps_infeasible',
                     'polish_delta'):
            if not getattr(self, name) > 0:
                raise ValueError(f'{name} must be positive')
        if not 1.0 <= self.alpha < 2.0:
            raise ValueError('alpha must lie in [1, 2)')
        if self.max_iter < 1:
            raise ValueError('max_iter must be at least 1')
        if self.check_interval < 1 or self.adaptive_rho_interval < 1:
            raise ValueError('intervals must be at least 1')

    @classmethod
    def from_mapping(cls, values):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f'unknown solver setting(s): {sorted(unknown)}')
        return cls(**values)


@dataclasses.dataclass
class QPResult:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    polished: bool = False
    rho_updates: int = 0
    rho: float = 0.0

    def report(self):
        return {
            'status': self.status,
            'iterations': self.iterations,
            'primal_residual': self.primal_residual,
            'dual_residual': self.dual_residual,
            'polished': self.polished,
            'rho_updates': self.rho_updates,
            'rho': self.rho,
        }


def _limit(v):
    v = np.where(v < _SCALE_MIN, 1.0, v)
    return np.minimum(v, _SCALE_MAX)


def _col_inf_norms(M):
    M = sp.csc_matrix(M)
    if M.nnz == 0:
        return np.zeros(M.shape[1])
    return np.asarray(abs(M).max(axis=0).todense()).ravel()


def _row_inf_norms(M):
    M = sp.csr_matrix(M)
    if M.nnz == 0:
        return np.zeros(M.shape[0])
    return np.asarray(abs(M).max(axis=1).todense()).ravel()


class _Scaling:
    """Modified Ruiz equilibration of the KKT matrix plus cost scaling."""

    def __init__(self, P, q, A, iters):
        n, m = P.shape[0], A.shape[0]
        D = np.ones(n)
        E = np.ones(m)
        c = 1.0
        Ps, qs, As = P.copy(), q.copy(), A.copy()
        for _ in range(iters):
            dcol = np.maximum(_col_inf_norms(Ps), _col_inf_norms(As))
            d = 1.0 / np.sqrt(_limit(dcol))
            e = 1.0 / np.sqrt(_limit(_row_inf_norms(As))) if m else np.ones(0)
            Dd = sp.diags(d)
            Ps = Dd @ Ps @ Dd
            As = sp.diags(e) @ As @ Dd
            qs = d * qs
            D *= d
            E *= e
            # Average over the columns that carry curvature; zero columns
            # (e.g. a lam=0 block) would otherwise make the cost scale run away.
            pcols = _col_inf_norms(Ps)
            pcols = pcols[pcols > 0]
            pnorm = pcols.mean() if pcols.size else 0.0
            cost = max(pnorm, np.abs(qs).max() if n else 0.0)
            ct = 1.0 / _limit(np.array([cost]))[0]
            Ps = ct * Ps
            qs = ct * qs
            c *= ct
        self.D, self.E, self.c = D, E, c
        self.P = sp.csc_matrix(Ps)
        self.q = qs
        self.A = sp.csc_matrix(As)


def _constraint_rho(l, u, rho):
    rho_vec = np.full(l.shape, rho)
    free = np.isinf(l) & np.isinf(u)
    eq = np.isfinite(l) & np.isfinite(u) & (u - l < 1e-8 * np.maximum(1.0, np.abs(u)))
    rho_vec[free] = _RHO_MIN
    rho_vec[eq] = _RHO_EQ_SCALE * rho
    return rho_vec


def _factor_kkt(P, A, sigma, rho_vec):
    n = P.shape[0]
    K = sp.bmat([[P + sigma * sp.eye(n), A.T],
                 [A, -sp.diags(1.0 / rho_vec)]], format='csc')
    return spla.splu(K, permc_spec='COLAMD')


def _inf(v):
    return float(np.abs(v).max()) if v.size else 0.0


class _Residuals:
    """Unscaled residuals and termination thresholds for a scaled iterate."""

    def __init__(self, sc, x, y, z, eps_abs, eps_rel):
        Ax = sc.A @ x
        Px = sc.P @ x
        Aty = sc.A.T @ y
        Einv = 1.0 / sc.E
        Dinv = 1.0 / sc.D
        cinv = 1.0 / sc.c
        self.prim = _inf(Einv * (Ax - z))
        self.dual = cinv * _inf(Dinv * (Px + sc.q + Aty))
        self.prim_scale = max(_inf(Einv * Ax), _inf(Einv * z))
        self.dual_scale = cinv * max(_inf(Dinv * Px), _inf(Dinv * Aty),
                                     _inf(Dinv * sc.q))
        self.eps_prim = eps_abs + eps_rel * self.prim_scale
        self.eps_dual = eps_abs + eps_rel * self.dual_scale

    @property
    def converged(self):
        return self.prim <= self.eps_prim and self.dual <= self.eps_dual


def _primal_infeasible(sc, delta_y, l, u, eps):
    # l, u are the scaled bounds; the certificate is checked in unscaled units.
    dy = sc.E * delta_y
    norm_dy = _inf(dy)
    if norm_dy < 1e-12:
        return False
    Atdy = (1.0 / sc.D) * (sc.A.T @ delta_y)
    if _inf(Atdy) > eps * norm_dy:
        return False
    ul = u / sc.E
    ll = l / sc.E
    pos = np.maximum(dy, 0.0)
    neg = np.minimum(dy, 0.0)
    tiny = 1e-9 * norm_dy
    if np.any(np.isinf(ul) & (pos > tiny)) or np.any(np.isinf(ll) & (neg < -tiny)):
        return False
    support = (np.where(np.isfinite(ul), ul, 0.0) * pos).sum() + \
        (np.where(np.isfinite(ll), ll, 0.0) * neg).sum()
    return support < -eps * norm_dy


def _reduced_solve(sc, low, upp, l, u, settings):
    n = sc.P.shape[0]
    Al = sc.A[np.flatnonzero(low)]
    Au = sc.A[np.flatnonzero(upp)]
    ml, mu = Al.shape[0], Au.shape[0]
    delta = settings.polish_delta
    K = sp.bmat([[sc.P, Al.T, Au.T],
                 [Al, None, None],
                 [Au, None, None]], format='csc')
    if K.shape[0] != n + ml + mu:
        K = sp.csc_matrix(sp.block_diag([sc.P, sp.csc_matrix((ml + mu, ml + mu))]))
    reg = sp.diags(np.concatenate([np.full(n, delta), np.full(ml + mu, -delta)]))
    try:
        lu = spla.splu(sp.csc_matrix(K + reg), permc_spec='COLAMD')
    except RuntimeError:
        return None
    rhs = np.concatenate([-sc.q, l[low], u[upp]])
    sol = lu.solve(rhs)
    for _ in range(settings.polish_refine_iter):
        resid = rhs - K @ sol
        if _inf(resid) < 1e-14 * max(1.0, _inf(rhs)):
            break
        sol = sol + lu.solve(resid)
    if not np.all(np.isfinite(sol)):
        return None
    y = np.zeros(sc.A.shape[0])
    y[low] = sol[n:n + ml]
    y[upp] = sol[n + ml:]
    return sol[:n], y


def _polish(sc, x, y, z, l, u, settings):
    """Active-set refinement started from the ADMM guess.

    Each round solves the equality-constrained QP on the current active set,
    then releases rows whose multiplier has the wrong sign and activates rows
    whose bounds are violated. Equality rows are always active. The last flag
    of the result is True when the active set stopped changing, i.e. the point
    satisfies the sign conditions as well as the linear KKT equations.
    """
    eq = np.isfinite(l) & np.isfinite(u) & (u - l < 1e-8 * np.maximum(1.0, np.abs(u)))
    low = eq | ((z - l) < -y)
    upp = ~low & ((u - z) < y)
    best = None
    for _ in range(settings.polish_rounds):
        out = _reduced_solve(sc, low, upp, l, u, settings)
        if out is None:
            break
        xp, yp = out
        Ax = sc.A @ xp
        scale = max(1.0, _inf(yp))
        tol_p = 1e-12 * max(1.0, _inf(Ax))
        release_low = low & ~eq & (yp > 1e-12 * scale)
        release_upp = upp & (yp < -1e-12 * scale)
        add_low = ~low & ~upp & (Ax < l - tol_p)
        add_upp = ~low & ~upp & (Ax > u + tol_p)
        settled = not (release_low.any() or release_upp.any() or add_low.any()
                       or add_upp.any())
        best = (xp, yp, np.clip(Ax, l, u), settled)
        if settled:
            break
        low = (low & ~release_low) | add_low
        upp = (upp & ~release_upp) | add_upp
    return best


def solve_qp(P, q, A, l, u, settings=None, warm_start=None):
    """Solve a convex QP in OSQP form.

    Parameters
    ----------
    P : sparse (n, n) positive semidefinite matrix (full symmetric storage).
    q : (n,) array.
    A : sparse (m, n) constraint matrix.
    l, u : (m,) arrays of bounds; entries may be infinite.
    settings : SolverSettings, optional.
    warm_start : tuple (x, y, z) of unscaled iterates, optional.

    Returns
    -------
    QPResult
        ``status`` is one of ``'solved'``, ``'max_iter'`` or ``'infeasible'``.
        For ``'max_iter'`` the last iterate is returned.
    """
    settings = settings or SolverSettings()
    P = sp.csc_matrix(P, dtype=float)
    A = sp.csc_matrix(A, dtype=float)
    q = np.asarray(q, dtype=float)
    l = np.asarray(l, dtype=float)
    u = np.asarray(u, dtype=float)
    n, m = P.shape[0], A.shape[0]
    if np.any(l > u):
        raise ValueError('lower bound exceeds upper bound')

    sc = _Scaling(P, q, A, settings.scaling_iters)
    ls = sc.E * l
    us = sc.E * u

    if warm_start is not None:
        x0, y0, z0 = (np.asarray(v, dtype=float) for v in warm_start)
        x = x0 / sc.D
        y = sc.c * y0 / sc.E
        z = sc.E * z0
    else:
        x = np.zeros(n)
        y = np.zeros(m)
        z = np.clip(np.zeros(m), ls, us)

    rho = settings.rho
    rho_vec = _constraint_rho(ls, us, rho)
    lu = _factor_kkt(sc.P, sc.A, settings.sigma, rho_vec)
    sigma, alpha = settings.sigma, settings.alpha
    rho_updates = 0
    status = 'max_iter'
    polished = False
    res = None
    it = 0
    y_prev = y.copy()

    for it in range(1, settings.max_iter + 1):
        y_prev[:] = y
        rhs = np.concatenate([sigma * x - sc.q, z - y / rho_vec])
        sol = lu.solve(rhs)
        xt = sol[:n]
        zt = z + (sol[n:] - y) / rho_vec
        x = alpha * xt + (1.0 - alpha) * x
        zr = alpha * zt + (1.0 - alpha) * z
        z_new = np.clip(zr + y / rho_vec, ls, us)
        y = y + rho_vec * (zr - z_new)
        z = z_new

        if (settings.polish and settings.polish_interval
                and it % settings.polish_interval == 0 and it < settings.max_iter):
            out = _polish(sc, x, y, z, ls, us, settings)
            if out is not None and out[3]:
                rp = _Residuals(sc, out[0], out[1], out[2],
                                settings.eps_abs, settings.eps_rel)
                if rp.converged:
                    x, y, z = out[0], out[1], out[2]
                    res = rp
                    status = 'solved'
                    polished = True
                    break
        check = it % settings.check_interval == 0 or it == settings.max_iter
        adapt = settings.adaptive_rho and it % settings.adaptive_rho_interval == 0
        if not (check or adapt):
            continue
        res = _Residuals(sc, x, y, z, settings.eps_abs, settings.eps_rel)
        if res.converged:
            status = 'solved'
            break
        if check and _primal_infeasible(sc, y - y_prev, ls, us,
                                        settings.eps_infeasible):
            status = 'infeasible'
            break
        if adapt:
            ratio_p = res.prim / (res.prim_scale + 1e-30)
            ratio_d = res.dual / (res.dual_scale + 1e-30)
            new_rho = rho * np.sqrt(ratio_p / (ratio_d + 1e-30))
            new_rho = float(np.clip(new_rho, _RHO_MIN, _RHO_MAX))
            tol = settings.adaptive_rho_tolerance
            if new_rho > tol * rho or new_rho < rho / tol:
                rho = new_rho
                rho_vec = _constraint_rho(ls, us, rho)
                lu = _factor_kkt(sc.P, sc.A, sigma, rho_vec)
                rho_updates += 1

    if res is None:
        res = _Residuals(sc, x, y, z, settings.eps_abs, settings.eps_rel)

    if status == 'max_iter' or (status == 'solved' and settings.polish
                                 and not polished):
        out = _polish(sc, x, y, z, ls, us, settings) if settings.polish else None
        if out is not None and out[3]:
            xp, yp, zp, _ = out
            rp = _Residuals(sc, xp, yp, zp, settings.eps_abs, settings.eps_rel)
            # Accept when the polished point is at least as accurate or solves.
            if (rp.converged or (rp.prim <= max(res.prim, res.eps_prim)
                                 and rp.dual <= max(res.dual, res.eps_dual))):
                x, y, z, res = xp, yp, zp, rp
                polished = True
                if rp.converged:
                    status = 'solved'

    return QPResult(
        x=sc.D * x,
        y=sc.E * y / sc.c,
        z=z / sc.E,
        status=status,
        iterations=it,
        primal_residual=res.prim,
        dual_residual=res.dual,
        polished=polished,
        rho_updates=rho_updates,
        rho=rho,
    )
