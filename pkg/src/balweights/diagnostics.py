"""Weight and balance diagnostics and the lambda sweep.

Standardized differences always divide by the unweighted pooled standard
deviation ``sqrt((V_1 + V_0) / 2)`` of the two groups, before and after
weighting, so that the two are directly comparable. Within-cluster
differences reuse the overall pooled standard deviation of each column.
"""

import dataclasses
import logging
from typing import Optional, Sequence

import numpy as np

from balweights.balance.admm import SolverSettings
from balweights.balance.problem import assemble_problem, solve_admm
from balweights.errors import BalweightsError, DegenerateInputError, ValidationError

logger = logging.getLogger(__name__)

NO_BASELINE_IMBALANCE = 'no-baseline-imbalance'
SHARE_BELOW_THRESHOLD = 1e-6


def _w(weights):
    return np.asarray(getattr(weights, 'weights', weights), dtype=float)


def effective_sample_size(weights):
    """``(sum g)^2 / sum g^2``."""
    g = _w(weights)
    ss = float(g @ g)
    if g.size == 0 or ss == 0:
        raise DegenerateInputError('effective sample size of all-zero weights')
    return float(g.sum() ** 2 / ss)


def ess_per_cluster(weights, cluster, n_clusters=None):
    """Effective sample size within each cluster (NaN for clusters without weight)."""
    g = _w(weights)
    cluster = np.asarray(cluster, dtype=np.int64)
    J = int(n_clusters or cluster.max() + 1)
    s = np.bincount(cluster, weights=g, minlength=J)
    ss = np.bincount(cluster, weights=g * g, minlength=J)
    out = np.full(J, np.nan)
    ok = ss > 0
    out[ok] = s[ok] ** 2 / ss[ok]
    return out


def pooled_sd(x_focal, x_comparison):
    """Unweighted pooled standard deviation per column."""
    x1 = np.atleast_2d(np.asarray(x_focal, dtype=float).T).T
    x0 = np.atleast_2d(np.asarray(x_comparison, dtype=float).T).T
    v1 = x1.var(axis=0, ddof=1) if x1.shape[0] > 1 else np.zeros(x1.shape[1])
    v0 = x0.var(axis=0, ddof=1) if x0.shape[0] > 1 else np.zeros(x0.shape[1])
    return np.sqrt((v1 + v0) / 2.0)


@dataclasses.dataclass(frozen=True)
class StandardizedDifferences:
    """Standardized mean differences (focal minus comparison) per column.

    Skipped columns (zero pooled variance) hold 0.0 and are flagged.
    """

    delta: np.ndarray
    skipped: np.ndarray
    names: tuple = ()

    def __len__(self):
        return self.delta.shape[0]

    @property
    def active(self):
        return self.delta[~self.skipped]


def standardized_differences(x_focal, x_comparison, weights=None, names=(),
                             sd=None) -> StandardizedDifferences:
    """Per-column standardized differences, optionally after weighting.

    ``weights`` apply to the comparison rows (Hajek). ``sd`` overrides the
    pooled standard deviation, e.g. to reuse the overall one inside clusters.
    """
    x1 = np.asarray(x_focal, dtype=float)
    x0 = np.asarray(x_comparison, dtype=float)
    if x1.ndim == 1:
        x1, x0 = x1[:, None], x0[:, None]
    if sd is None:
        sd = pooled_sd(x1, x0)
    sd = np.asarray(sd, dtype=float)
    skipped = ~(sd > 1e-12 * np.maximum(1.0, np.abs(x1).max(axis=0, initial=0.0)))
    m1 = x1.mean(axis=0)
    if weights is None:
        m0 = x0.mean(axis=0)
    else:
        g = _w(weights)
        if g.shape[0] != x0.shape[0]:
            raise ValidationError('weights do not match the comparison rows')
        tot = g.sum()
        if tot == 0:
            raise DegenerateInputError('weights sum to zero')
        m0 = g @ x0 / tot
    delta = np.where(skipped, 0.0, (m1 - m0) / np.where(skipped, 1.0, sd))
    return StandardizedDifferences(delta=delta, skipped=skipped, names=tuple(names))


def _abs_sum(d):
    if isinstance(d, StandardizedDifferences):
        return float(np.abs(d.active).sum())
    return float(np.abs(np.asarray(d, dtype=float)).sum())


def pbr(delta_unweighted, delta_weighted):
    """Percentage of bias reduction ``100 (1 - sum|d_w| / sum|d_uw|)``.

    Returns ``NO_BASELINE_IMBALANCE`` when there is nothing to reduce.
    """
    base = _abs_sum(delta_unweighted)
    if base == 0:
        return NO_BASELINE_IMBALANCE
    return 100.0 * (1.0 - _abs_sum(delta_weighted) / base)


def pbr_within_clusters(deltas_unweighted, deltas_weighted):
    """PBR on the stacked (cluster x covariate) standardized differences."""
    a = np.asarray(deltas_unweighted, dtype=float).ravel()
    b = np.asarray(deltas_weighted, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValidationError('stacked deltas differ in shape')
    # Averages over the J = K * H stacked terms; the 1/J factors cancel.
    base = np.abs(a).mean() if a.size else 0.0
    if base == 0:
        return NO_BASELINE_IMBALANCE
    return 100.0 * (1.0 - np.abs(b).mean() / base)


def cluster_standardized_differences(x_focal, cluster_focal, x_comparison,
                                     cluster_comparison, weights, n_clusters, sd):
    """Before/after standardized differences within every cluster.

    Returns ``(before, after, present)`` where ``before`` and ``after`` have
    shape (J, K) and ``present`` flags the clusters with both focal and
    comparison rows. Rows of absent clusters are zero.
    """
    x1 = np.asarray(x_focal, dtype=float)
    x0 = np.asarray(x_comparison, dtype=float)
    c1 = np.asarray(cluster_focal, dtype=np.int64)
    c0 = np.asarray(cluster_comparison, dtype=np.int64)
    g = _w(weights)
    K = x1.shape[1]
    before = np.zeros((n_clusters, K))
    after = np.zeros((n_clusters, K))
    present = np.zeros(n_clusters, dtype=bool)
    for j in range(n_clusters):
        f = c1 == j
        c = c0 == j
        if not f.any() or not c.any():
            continue
        present[j] = True
        before[j] = standardized_differences(x1[f], x0[c], sd=sd).delta
        if g[c].sum() != 0:
            after[j] = standardized_differences(x1[f], x0[c], g[c], sd=sd).delta
        else:
            after[j] = before[j]
    return before, after, present


def rmsi(deltas):
    """Root mean squared imbalance across clusters.

    ``deltas`` has shape (H, K). Returns ``(per_covariate, overall)`` where
    ``overall`` is the mean of the per-covariate values.
    """
    d = np.atleast_2d(np.asarray(deltas, dtype=float))
    if d.shape[0] == 0:
        return np.zeros(d.shape[1]), 0.0
    per = np.sqrt((d ** 2).mean(axis=0))
    return per, float(per.mean()) if per.size else 0.0


def extrapolation_percentage(weights, cluster=None, n_clusters=None):
    """Negative weight mass as a percentage of each cluster's total weight.

    Returns ``(overall, per_cluster, note)``. Restricted weights give zero with
    a note. The numerator is the absolute negative mass ``sum |g| 1{g < 0}``.
    """
    g = _w(weights)
    bound_mode = getattr(weights, 'bound_mode', None)
    if cluster is None:
        cluster = getattr(weights, 'cluster', None)
    if cluster is None:
        cluster = np.zeros(g.size, dtype=np.int64)
    cluster = np.asarray(cluster, dtype=np.int64)
    J = int(n_clusters or getattr(weights, 'n_clusters', 0) or cluster.max() + 1)
    if bound_mode == 'restricted':
        return 0.0, np.zeros(J), 'restricted weights cannot extrapolate'
    neg = np.bincount(cluster, weights=np.where(g < 0, -g, 0.0), minlength=J)
    tot = np.bincount(cluster, weights=g, minlength=J)
    per = np.divide(100.0 * neg, tot, out=np.zeros(J), where=tot != 0)
    overall = 100.0 * neg.sum() / g.sum() if g.sum() != 0 else 0.0
    return float(overall), per, ''


def weight_summary(weights, n_focal, cluster=None, n_clusters=None):
    """Count-scale summary: largest weight, share of near-zero weights, ESS."""
    g = _w(weights)
    if g.size == 0:
        raise ValidationError('empty weight vector')
    counts = g / g.sum() * n_focal
    if cluster is None:
        cluster = getattr(weights, 'cluster', None)
    out = {
        'max_weight_count_scale': float(counts.max()),
        'share_below': float(np.mean(np.abs(counts) < SHARE_BELOW_THRESHOLD)),
        'ess_total': effective_sample_size(g),
    }
    if cluster is not None:
        out['ess_per_cluster'] = ess_per_cluster(g, cluster, n_clusters)
    return out


@dataclasses.dataclass(frozen=True)
class BalanceReport:
    names: tuple
    delta_before: StandardizedDifferences
    delta_after: StandardizedDifferences
    pbr: object
    ess_total: float
    max_weight: float
    share_below: float
    extrapolation_pct: float
    cluster_labels: tuple = ()
    cluster_before: Optional[np.ndarray] = None
    cluster_after: Optional[np.ndarray] = None
    cluster_present: Optional[np.ndarray] = None
    pbr_h: object = None
    rmsi_before: Optional[np.ndarray] = None
    rmsi_after: Optional[np.ndarray] = None
    ess_per_cluster: Optional[np.ndarray] = None
    extrapolation_per_cluster: Optional[np.ndarray] = None
    notes: tuple = ()

    def rows(self):
        """Flat rows (covariate, cluster, before, after, skipped) for CSV output."""
        out = []
        for k, name in enumerate(self.names):
            out.append((name, 'ALL', float(self.delta_before.delta[k]),
                        float(self.delta_after.delta[k]),
                        bool(self.delta_before.skipped[k])))
        if self.cluster_before is not None:
            for j, label in enumerate(self.cluster_labels):
                if not self.cluster_present[j]:
                    continue
                for k, name in enumerate(self.names):
                    out.append((name, str(label), float(self.cluster_before[j, k]),
                                float(self.cluster_after[j, k]),
                                bool(self.delta_before.skipped[k])))
        return out


def balance_report(dataset, matrix, weights, names=None) -> BalanceReport:
    """All balance diagnostics for comparison weights on the columns of ``matrix``."""
    M = np.asarray(getattr(matrix, 'matrix', matrix), dtype=float)
    if names is None:
        names = getattr(matrix, 'column_names', tuple(f'c{k}' for k in range(M.shape[1])))
    f, c = dataset.focal, dataset.comparison
    g = _w(weights)
    sd = pooled_sd(M[f], M[c])
    before = standardized_differences(M[f], M[c], names=names, sd=sd)
    after = standardized_differences(M[f], M[c], g, names=names, sd=sd)
    summary = weight_summary(g, dataset.n_focal)
    notes = []
    if np.any(before.skipped):
        notes.append('skipped zero-variance columns: ' + ', '.join(
            n for n, s in zip(names, before.skipped) if s))
    kw = {}
    if dataset.clustered:
        J = dataset.n_clusters
        cb, ca, present = cluster_standardized_differences(
            M[f], dataset.cluster[f], M[c], dataset.cluster[c], g, J, sd)
        keep = ~before.skipped
        stack_b = cb[present][:, keep]
        stack_a = ca[present][:, keep]
        kw = dict(cluster_labels=dataset.cluster_labels, cluster_before=cb,
                  cluster_after=ca, cluster_present=present,
                  pbr_h=pbr_within_clusters(stack_b, stack_a),
                  rmsi_before=rmsi(cb[present])[0], rmsi_after=rmsi(ca[present])[0],
                  ess_per_cluster=ess_per_cluster(g, dataset.cluster[c], J))
        ext, ext_j, note = extrapolation_percentage(weights, dataset.cluster[c], J)
        kw['extrapolation_per_cluster'] = ext_j
    else:
        ext, _, note = extrapolation_percentage(weights, np.zeros(g.size, dtype=np.int64), 1)
    if note:
        notes.append(note)
    notes.append('extrapolation numerator: absolute negative weight mass '
                 '(alternative: net negative sum)')
    return BalanceReport(
        names=tuple(names), delta_before=before, delta_after=after,
        pbr=pbr(before, after), ess_total=summary['ess_total'],
        max_weight=summary['max_weight_count_scale'],
        share_below=summary['share_below'], extrapolation_pct=ext,
        notes=tuple(notes), **kw)


@dataclasses.dataclass(frozen=True)
class SweepRow:
    lam: float
    bound_mode: str
    pbr: object
    pbr_h: object
    ess: float
    status: str
    iterations: int
    imbalance: float
    weights: object = dataclasses.field(default=None, repr=False, compare=False)


def sweep_lambda(dataset, matrix, target, lambda_grid: Sequence[float],
                 bounds='restricted', mode=None, settings: Optional[SolverSettings] = None,
                 warm_start=True, keep_weights=False):
    """Solve the balancing problem along ``lambda_grid`` (sorted ascending).

    Each solve is warm-started from the previous one. A failing grid point is
    recorded with its status and the sweep continues.
    """
    grid = [float(v) for v in lambda_grid]
    if not grid:
        raise ValidationError('lambda grid is empty')
    if any(b < a for a, b in zip(grid, grid[1:])):
        raise ValidationError('lambda grid must be sorted ascending')
    M = np.asarray(getattr(matrix, 'matrix', matrix), dtype=float)
    mode = mode or ('clustered' if dataset.clustered else 'unclustered')
    f, c = dataset.focal, dataset.comparison
    cluster_c = dataset.cluster[c] if dataset.clustered else None
    sd = pooled_sd(M[f], M[c])
    before = standardized_differences(M[f], M[c], sd=sd)
    if dataset.clustered:
        J = dataset.n_clusters
        cb, _, present = cluster_standardized_differences(
            M[f], dataset.cluster[f], M[c], cluster_c, np.ones(c.sum()), J, sd)
    rows = []
    prev = None
    for lam in grid:
        try:
            problem = assemble_problem(M[c], cluster_c, target, lam, bounds, mode)
            w = solve_admm(problem, settings, warm_start=prev if warm_start else None)
            status = w.solver_report['status']
            after = standardized_differences(M[f], M[c], w, sd=sd)
            value = pbr(before, after)
            value_h = None
            if dataset.clustered:
                _, ca, _ = cluster_standardized_differences(
                    M[f], dataset.cluster[f], M[c], cluster_c, w, J, sd)
                keep = ~before.skipped
                value_h = pbr_within_clusters(cb[present][:, keep], ca[present][:, keep])
            rows.append(SweepRow(lam, bounds, value, value_h,
                                 effective_sample_size(w), status,
                                 w.solver_report['iterations'],
                                 w.solver_report['imbalance'],
                                 w if keep_weights else None))
            if status == 'solved':
                prev = w
        except BalweightsError as exc:
            logger.warning('sweep point lambda=%g failed: %s', lam, exc)
            rows.append(SweepRow(lam, bounds, None, None, float('nan'),
                                 f'error: {exc}', 0, float('nan')))
    return rows
