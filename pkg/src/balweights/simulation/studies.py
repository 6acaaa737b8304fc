"""Monte Carlo runners for the design study and the inference study.

Replication ``r`` of a study with seed ``s`` draws from
``numpy.random.default_rng([s, r])`` (and, in the inference study, the overlap
level enters the seed too), so results do not depend on the order in which
replications run. Balancing weights use the unclustered approximate-balance
problem on covariates scaled by their unweighted pooled standard deviation;
with that scaling the objective's imbalance vector is exactly the vector of
weighted standardized differences.
"""

import concurrent.futures
import dataclasses
import logging
import math
from typing import Optional, Sequence

import numpy as np

from balweights.balance.admm import SolverSettings
from balweights.balance.problem import assemble_problem, solve_admm
from balweights.data import empirical_target
from balweights.diagnostics import (effective_sample_size, pbr, pooled_sd,
                                    standardized_differences)
from balweights.errors import BalweightsError, ValidationError
from balweights.estimators import (fit_outcome_model, focal_mean_var, hc2_variance,
                                   rve_variance, weighted_mean, z_value)
from balweights.simulation.dgp import TRUE_EFFECT, DgpConfig, generate_sample
from balweights.simulation.ipw import fit_ipw_logistic

logger = logging.getLogger(__name__)

BALANCING_METHODS = ('restricted', 'unrestricted')
ALL_METHODS = ('ipw',) + BALANCING_METHODS
SE_METHODS = ('rve', 'hc2')

DESIGN_GRID = tuple(np.arange(0.0, 150.0 + 1e-9, 15.0))
INFERENCE_GRID = tuple(np.arange(0.0, 15.0 + 1e-9, 2.5))


@dataclasses.dataclass(frozen=True)
class StudyConfig:
    dgp: DgpConfig = DgpConfig()
    replications: int = 200
    lambda_grid: tuple = DESIGN_GRID
    methods: tuple = ALL_METHODS
    alpha: float = 0.05
    se_methods: tuple = SE_METHODS
    c_grid: Optional[tuple] = None
    workers: int = 1
    solver: SolverSettings = SolverSettings()

    def __post_init__(self):
        if self.replications < 1:
            raise ValidationError('replications must be at least 1')
        grid = tuple(float(v) for v in self.lambda_grid)
        if not grid:
            raise ValidationError('lambda grid is empty')
        if any(b < a for a, b in zip(grid, grid[1:])) or grid[0] < 0:
            raise ValidationError('lambda grid must be nonnegative and ascending')
        object.__setattr__(self, 'lambda_grid', grid)
        bad = set(self.methods) - set(ALL_METHODS)
        if bad:
            raise ValidationError(f'unknown method(s): {sorted(bad)}')
        bad = set(self.se_methods) - set(SE_METHODS)
        if bad:
            raise ValidationError(f'unknown se method(s): {sorted(bad)}')
        if self.c_grid is not None:
            object.__setattr__(self, 'c_grid', tuple(float(c) for c in self.c_grid))

    @property
    def overlap_levels(self):
        return self.c_grid or (self.dgp.c,)


def _rng(seed, *stream):
    return np.random.default_rng([int(seed), *[int(s) for s in stream]])


def standardized_basis(dataset):
    """Covariates divided by their unweighted pooled standard deviation."""
    X = dataset.covariates
    sd = pooled_sd(X[dataset.focal], X[dataset.comparison])
    return X / np.where(sd > 0, sd, 1.0)


# Design study ---------------------------------------------------------------

def _design_replication(args):
    config, c, rep = args
    dgp = dataclasses.replace(config.dgp, c=c)
    ds = generate_sample(dgp, rng=_rng(config.dgp.seed, _c_stream(c), rep))
    X = ds.covariates
    f, cm = ds.focal, ds.comparison
    before = standardized_differences(X[f], X[cm])
    out = {}
    if 'ipw' in config.methods:
        try:
            w, _ = fit_ipw_logistic(ds)
            after = standardized_differences(X[f], X[cm], w)
            value = (pbr(before, after), effective_sample_size(w))
            out['ipw'] = [value] * len(config.lambda_grid)
        except BalweightsError as exc:
            out['ipw'] = str(exc)
    phi = standardized_basis(ds)
    target = empirical_target(ds, phi)
    for method in BALANCING_METHODS:
        if method not in config.methods:
            continue
        rows = []
        prev = None
        try:
            for lam in config.lambda_grid:
                problem = assemble_problem(phi[cm], None, target, lam, method,
                                           'unclustered')
                w = solve_admm(problem, config.solver, warm_start=prev)
                if w.solver_report['status'] != 'solved':
                    raise BalweightsError(
                        f'solver status {w.solver_report["status"]} at lambda={lam}')
                prev = w
                after = standardized_differences(X[f], X[cm], w)
                rows.append((pbr(before, after), effective_sample_size(w)))
            out[method] = rows
        except BalweightsError as exc:
            out[method] = str(exc)
    return c, rep, out


def _map(fn, tasks, workers):
    if workers and workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as ex:
            return list(ex.map(fn, tasks, chunksize=max(1, len(tasks) // (4 * workers))))
    return [fn(t) for t in tasks]


@dataclasses.dataclass
class DesignStudyResult:
    """Aggregated table plus the per-replication values.

    ``replications[(c, method)]`` is an array of shape (R, L, 2) holding PBR
    and ESS per replication and lambda (NaN rows for excluded replications).
    """

    table: list
    replications: dict
    failures: dict


def run_design_study(config: StudyConfig) -> DesignStudyResult:
    """Mean PBR and ESS per (overlap, method, lambda) over replications."""
    tasks = [(config, c, r) for c in config.overlap_levels
             for r in range(config.replications)]
    results = _map(_design_replication, tasks, config.workers)
    L = len(config.lambda_grid)
    reps = {}
    failures = {}
    for c, rep, out in results:
        for method, value in out.items():
            arr = reps.setdefault((c, method), np.full((config.replications, L, 2), np.nan))
            if isinstance(value, str):
                failures.setdefault((c, method), []).append((rep, value))
            else:
                arr[rep] = np.asarray(value, dtype=float)
    table = []
    for c in config.overlap_levels:
        for method in ALL_METHODS:
            if (c, method) not in reps:
                continue
            arr = reps[(c, method)]
            ok = ~np.isnan(arr[:, 0, 0])
            n_excl = int((~ok).sum())
            for k, lam in enumerate(config.lambda_grid):
                vals = arr[ok, k]
                table.append({
                    'lambda': lam, 'method': method, 'c': c,
                    'pbr': float(vals[:, 0].mean()) if ok.any() else float('nan'),
                    'ess': float(vals[:, 1].mean()) if ok.any() else float('nan'),
                    'n_excluded': n_excl,
                })
    return DesignStudyResult(table=table, replications=reps, failures=failures)


# Inference study ------------------------------------------------------------

def _inference_replication(args):
    config, c, rep = args
    dgp = dataclasses.replace(config.dgp, c=c)
    ds = generate_sample(dgp, rng=_rng(config.dgp.seed, _c_stream(c), rep))
    f, cm = ds.focal, ds.comparison
    y1, y0 = ds.outcome[f], ds.outcome[cm]
    phi = standardized_basis(ds)
    target = empirical_target(ds, phi)
    z = z_value(config.alpha)
    out = []
    prev = None
    try:
        mu1, v1 = focal_mean_var(y1)
        for lam in config.lambda_grid:
            problem = assemble_problem(phi[cm], None, target, lam, 'restricted',
                                       'unclustered')
            w = solve_admm(problem, config.solver, warm_start=prev)
            if w.solver_report['status'] != 'solved':
                raise BalweightsError(
                    f'solver status {w.solver_report["status"]} at lambda={lam}')
            prev = w
            mu0 = weighted_mean(w, y0)
            point = mu1 - mu0
            ses = {}
            if 'rve' in config.se_methods:
                fit = fit_outcome_model(phi[cm], y0, w)
                ses['rve'] = math.sqrt(v1 + rve_variance(w, y0, fit))
            if 'hc2' in config.se_methods:
                h1, h0 = hc2_variance(w, y1, y0)
                ses['hc2'] = math.sqrt(h1 + h0)
            out.append((point, {k: (s, abs(point - TRUE_EFFECT) <= z * s)
                                for k, s in ses.items()}))
    except BalweightsError as exc:
        return c, rep, str(exc)
    return c, rep, out


def _c_stream(c):
    # Stable integer stream id for an overlap level (c given to 1e-6).
    return int(round(float(c) * 1e6))


@dataclasses.dataclass
class InferenceStudyResult:
    table: list
    failures: dict


def run_inference_study(config: StudyConfig) -> InferenceStudyResult:
    """Bias, mean SE and CI coverage of restricted weights, per SE method."""
    tasks = [(config, c, r) for c in config.overlap_levels
             for r in range(config.replications)]
    results = _map(_inference_replication, tasks, config.workers)
    by_c = {}
    failures = {}
    for c, rep, out in results:
        if isinstance(out, str):
            failures.setdefault(c, []).append((rep, out))
            continue
        by_c.setdefault(c, []).append(out)
    table = []
    for c in config.overlap_levels:
        runs = by_c.get(c, [])
        n_excl = len(failures.get(c, []))
        for k, lam in enumerate(config.lambda_grid):
            points = np.array([r[k][0] for r in runs]) if runs else np.zeros(0)
            for sm in SE_METHODS:
                if sm not in config.se_methods:
                    continue
                se = np.array([r[k][1][sm][0] for r in runs]) if runs else np.zeros(0)
                cov = np.array([r[k][1][sm][1] for r in runs], dtype=float) \
                    if runs else np.zeros(0)
                R = cov.size
                p = float(cov.mean()) if R else float('nan')
                table.append({
                    'c': c, 'lambda': lam, 'se_method': sm,
                    'bias': float(points.mean() - TRUE_EFFECT) if R else float('nan'),
                    'mean_se': float(se.mean()) if R else float('nan'),
                    'coverage': p,
                    'mc_se': math.sqrt(p * (1 - p) / R) if R else float('nan'),
                    'n_excluded': n_excl,
                })
    return InferenceStudyResult(table=table, failures=failures)
