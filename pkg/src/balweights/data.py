"""Datasets, target distributions and weight containers, plus CSV ingestion.

Weights are kept on the probability scale throughout: per-cluster sums equal
the target cluster mass and the total equals one. Reporting helpers rescale by
``n_focal`` to the count scale where a diagnostic is naturally read in units of
focal rows (e.g. "the largest weight stands in for 4 focal units").
"""

import csv
import dataclasses
import math
from typing import Mapping, Optional, Sequence

import numpy as np

from balweights.errors import NoOverlapError, SchemaError, ValidationError

_MISSING_TOKENS = {'', 'na', 'nan', 'null', 'none', '.'}


def _frozen(a, dtype=None):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclasses.dataclass(frozen=True)
class ColumnSchema:
    """Mapping from dataset roles to CSV column names."""

    group: str
    outcomes: Sequence[str]
    covariates: Sequence[str]
    cluster: Optional[str] = None
    id: Optional[str] = None

    def __post_init__(self):
        if isinstance(self.outcomes, str):
            object.__setattr__(self, 'outcomes', (self.outcomes,))
        object.__setattr__(self, 'outcomes', tuple(self.outcomes))
        object.__setattr__(self, 'covariates', tuple(self.covariates))
        if not self.outcomes:
            raise ValueError('at least one outcome column is required')


@dataclasses.dataclass(frozen=True, eq=False)
class AnalysisDataset:
    """Unit-level data: group flag, optional cluster, outcome(s), covariates.

    ``group`` is 1 for focal rows and 0 for comparison rows. ``cluster`` holds
    integer codes ``0..J-1`` assigned in order of first appearance; the
    original labels are in ``cluster_labels``. Several outcomes may be carried;
    ``outcome`` is the one named by ``outcome_name``.
    """

    group: np.ndarray
    outcomes: Mapping[str, np.ndarray]
    covariates: np.ndarray
    covariate_names: tuple
    outcome_name: str
    cluster: Optional[np.ndarray] = None
    cluster_labels: tuple = ()
    row_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        group = _frozen(self.group, dtype=np.int8)
        n = group.shape[0]
        if not np.all((group == 0) | (group == 1)):
            raise ValidationError('group flags must be 0 or 1')
        covariates = _frozen(self.covariates, dtype=float)
        if covariates.ndim == 1:
            covariates = _frozen(covariates.reshape(n, -1))
        if covariates.shape[0] != n:
            raise ValidationError('covariate rows do not match group rows')
        if not np.all(np.isfinite(covariates)):
            raise ValidationError('covariates contain missing or non-finite values')
        names = tuple(self.covariate_names)
        if len(names) != covariates.shape[1]:
            raise ValidationError('covariate_names length does not match columns')
        outcomes = {}
        for k, v in dict(self.outcomes).items():
            v = _frozen(v, dtype=float)
            if v.shape != (n,):
                raise ValidationError(f'outcome {k!r} has the wrong length')
            outcomes[k] = v
        if self.outcome_name not in outcomes:
            raise ValidationError(f'unknown outcome {self.outcome_name!r}')
        cluster = self.cluster
        labels = tuple(self.cluster_labels)
        if cluster is not None:
            cluster = _frozen(cluster, dtype=np.int64)
            if cluster.shape != (n,):
                raise ValidationError('cluster ids have the wrong length')
            if not labels:
                labels = tuple(range(int(cluster.max()) + 1 if n else 0))
            if n and (cluster.min() < 0 or cluster.max() >= len(labels)):
                raise ValidationError('cluster codes out of range')
        row_ids = self.row_ids
        if row_ids is None:
            row_ids = np.arange(n)
        row_ids = _frozen(row_ids)
        if row_ids.shape != (n,):
            raise ValidationError('row_ids have the wrong length')
        object.__setattr__(self, 'group', group)
        object.__setattr__(self, 'covariates', covariates)
        object.__setattr__(self, 'covariate_names', names)
        object.__setattr__(self, 'outcomes', outcomes)
        object.__setattr__(self, 'cluster', cluster)
        object.__setattr__(self, 'cluster_labels', labels)
        object.__setattr__(self, 'row_ids', row_ids)

    @property
    def n(self):
        return self.group.shape[0]

    @property
    def d(self):
        return self.covariates.shape[1]

    @property
    def n_focal(self):
        return int(self.group.sum())

    @property
    def n_comparison(self):
        return self.n - self.n_focal

    @property
    def outcome(self):
        return self.outcomes[self.outcome_name]

    @property
    def clustered(self):
        return self.cluster is not None

    @property
    def n_clusters(self):
        return len(self.cluster_labels) if self.clustered else None

    @property
    def focal(self):
        return self.group == 1

    @property
    def comparison(self):
        return self.group == 0

    def column(self, name):
        try:
            return self.covariates[:, self.covariate_names.index(name)]
        except ValueError:
            raise KeyError(name) from None

    def with_outcome(self, name):
        return dataclasses.replace(self, outcome_name=name)

    def subset(self, mask_or_index):
        """Rows selected by a boolean mask or an index array.

        Cluster codes are kept (not re-interned) so that labels stay stable
        across subsets of the same source file.
        """
        idx = np.asarray(mask_or_index)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        return dataclasses.replace(
            self,
            group=self.group[idx],
            outcomes={k: v[idx] for k, v in self.outcomes.items()},
            covariates=self.covariates[idx],
            cluster=None if self.cluster is None else self.cluster[idx],
            row_ids=self.row_ids[idx],
        )

    def _row_labels(self):
        return [str(self.cluster_labels[c]) for c in self.cluster]

    def equals(self, other):
        """Exact (bitwise for numeric fields) equality."""
        if not isinstance(other, AnalysisDataset):
            return False
        # Compare clusters through their labels row by row: codes depend on
        # the order in which labels first appear.
        same_cluster = (self.cluster is None and other.cluster is None) or (
            self.cluster is not None and other.cluster is not None
            and self._row_labels() == other._row_labels())
        return (np.array_equal(self.group, other.group)
                and np.array_equal(self.covariates, other.covariates)
                and self.covariate_names == other.covariate_names
                and self.outcome_name == other.outcome_name
                and self.outcomes.keys() == other.outcomes.keys()
                and all(np.array_equal(v, other.outcomes[k])
                        for k, v in self.outcomes.items())
                and same_cluster
                and np.array_equal(self.row_ids.astype(str),
                                   other.row_ids.astype(str)))


def _parse_float(text, column, row):
    if text.strip().lower() in _MISSING_TOKENS:
        raise ValidationError(f'missing value in column {column!r} at row {row}')
    try:
        value = float(text)
    except ValueError:
        raise ValidationError(
            f'non-numeric value {text!r} in column {column!r} at row {row}') from None
    if not math.isfinite(value):
        raise ValidationError(
            f'non-finite value {text!r} in column {column!r} at row {row}')
    return value


def load_dataset(path, schema: ColumnSchema) -> AnalysisDataset:
    """Read a UTF-8, comma-delimited CSV with a header row.

    Row numbers in error messages count data rows from 1 (the header is not
    counted). Cluster labels are interned to codes in order of first
    appearance.
    """
    with open(path, newline='', encoding='utf-8') as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f'{path}: empty file, header row expected') from None
        header = [h.strip() for h in header]
        index = {name: i for i, name in enumerate(header)}
        wanted = [schema.group, *schema.outcomes, *schema.covariates]
        if schema.cluster:
            wanted.append(schema.cluster)
        if schema.id:
            wanted.append(schema.id)
        for name in wanted:
            if name not in index:
                raise SchemaError(f'column {name!r} not found in {path}')

        group, cluster_raw, ids = [], [], []
        outcomes = {k: [] for k in schema.outcomes}
        covs = []
        for row_no, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise ValidationError(f'row {row_no} has {len(row)} fields, '
                                      f'expected {len(header)}')
            g = _parse_float(row[index[schema.group]], schema.group, row_no)
            if g not in (0.0, 1.0):
                raise ValidationError(
                    f'group value {row[index[schema.group]]!r} at row {row_no} '
                    f'is not 0 or 1')
            group.append(int(g))
            for k in schema.outcomes:
                outcomes[k].append(_parse_float(row[index[k]], k, row_no))
            covs.append([_parse_float(row[index[k]], k, row_no)
                         for k in schema.covariates])
            if schema.cluster:
                label = row[index[schema.cluster]].strip()
                if label.lower() in _MISSING_TOKENS:
                    raise ValidationError(
                        f'missing value in column {schema.cluster!r} at row {row_no}')
                cluster_raw.append(label)
            if schema.id:
                rid = row[index[schema.id]].strip()
                if rid.lower() in _MISSING_TOKENS:
                    raise ValidationError(
                        f'missing value in column {schema.id!r} at row {row_no}')
                ids.append(rid)
            else:
                ids.append(row_no - 1)

    cluster = None
    labels = ()
    if schema.cluster:
        codes = {}
        for label in cluster_raw:
            codes.setdefault(label, len(codes))
        cluster = np.array([codes[c] for c in cluster_raw], dtype=np.int64)
        labels = tuple(codes)
    n = len(group)
    return AnalysisDataset(
        group=np.array(group, dtype=np.int8),
        outcomes={k: np.array(v, dtype=float) for k, v in outcomes.items()},
        covariates=np.array(covs, dtype=float).reshape(n, len(schema.covariates)),
        covariate_names=tuple(schema.covariates),
        outcome_name=schema.outcomes[0],
        cluster=cluster,
        cluster_labels=labels,
        row_ids=np.array(ids, dtype=object if schema.id else np.int64),
    )


def write_dataset(dataset: AnalysisDataset, path, group_column='group',
                  cluster_column='cluster', id_column='id'):
    """Write a dataset so that :func:`load_dataset` reproduces it exactly.

    Floats are written with ``repr`` which round-trips bitwise. Returns the
    :class:`ColumnSchema` to reload with.
    """
    header = [id_column, group_column]
    if dataset.clustered:
        header.append(cluster_column)
    header += list(dataset.outcomes) + list(dataset.covariate_names)
    with open(path, 'w', newline='', encoding='utf-8') as fh:
        w = csv.writer(fh, lineterminator='\n')
        w.writerow(header)
        for i in range(dataset.n):
            row = [str(dataset.row_ids[i]), str(int(dataset.group[i]))]
            if dataset.clustered:
                row.append(str(dataset.cluster_labels[dataset.cluster[i]]))
            row += [repr(float(v[i])) for v in dataset.outcomes.values()]
            row += [repr(float(x)) for x in dataset.covariates[i]]
            w.writerow(row)
    outcomes = list(dataset.outcomes)
    outcomes.remove(dataset.outcome_name)
    return ColumnSchema(
        group=group_column,
        outcomes=(dataset.outcome_name, *outcomes),
        covariates=dataset.covariate_names,
        cluster=cluster_column if dataset.clustered else None,
        id=id_column,
    )


@dataclasses.dataclass(frozen=True, eq=False)
class TargetDistribution:
    """Cluster masses and within-cluster basis means of the target population.

    Arrays are indexed by cluster code. In unclustered mode there is a single
    pseudo-cluster with mass one. ``focal_counts`` keeps the number of focal
    rows per cluster so reports can move to the count scale.
    """

    cluster_mass: np.ndarray
    within_cluster_means: np.ndarray
    overall_mean: np.ndarray
    focal_counts: np.ndarray
    cluster_labels: tuple = ()
    clustered: bool = True

    def __post_init__(self):
        mass = _frozen(self.cluster_mass, dtype=float)
        means = _frozen(np.atleast_2d(self.within_cluster_means), dtype=float)
        overall = _frozen(self.overall_mean, dtype=float)
        if np.any(mass < 0) or abs(mass.sum() - 1.0) > 1e-12:
            raise ValidationError('cluster mass must be nonnegative and sum to 1')
        if means.shape != (mass.shape[0], overall.shape[0]):
            raise ValidationError('within-cluster means have the wrong shape')
        if not np.allclose(mass @ means, overall, rtol=0, atol=1e-10):
            raise ValidationError('overall mean is not the mass-weighted mixture')
        object.__setattr__(self, 'cluster_mass', mass)
        object.__setattr__(self, 'within_cluster_means', means)
        object.__setattr__(self, 'overall_mean', overall)
        object.__setattr__(self, 'focal_counts',
                           _frozen(self.focal_counts, dtype=np.int64))

    @property
    def basis_dim(self):
        return self.overall_mean.shape[0]

    @property
    def n_clusters(self):
        return self.cluster_mass.shape[0]

    @property
    def n_focal(self):
        return int(self.focal_counts.sum())

    @property
    def scaled_targets(self):
        """``P*(H=j) * E[phi | H=j]`` per cluster, shape (J, p)."""
        return self.cluster_mass[:, None] * self.within_cluster_means


def empirical_target(dataset: AnalysisDataset, design) -> TargetDistribution:
    """Target distribution given by the focal rows of ``dataset``.

    ``design`` is an :class:`~balweights.basis.ExpandedDesign` (or a plain
    matrix) evaluated on all rows of ``dataset``.
    """
    matrix = np.asarray(getattr(design, 'matrix', design), dtype=float)
    if matrix.shape[0] != dataset.n:
        raise ValidationError('design rows do not match the dataset')
    focal = dataset.focal
    n1 = int(focal.sum())
    if n1 == 0:
        raise ValidationError('the dataset has no focal rows')
    overall = matrix[focal].mean(axis=0)
    if not dataset.clustered:
        return TargetDistribution(
            cluster_mass=np.ones(1),
            within_cluster_means=overall[None, :],
            overall_mean=overall,
            focal_counts=np.array([n1]),
            cluster_labels=('ALL',),
            clustered=False,
        )
    J = dataset.n_clusters
    counts = np.bincount(dataset.cluster[focal], minlength=J)
    comp_counts = np.bincount(dataset.cluster[~focal], minlength=J)
    bad = [dataset.cluster_labels[j] for j in range(J)
           if counts[j] > 0 and comp_counts[j] == 0]
    if bad:
        raise NoOverlapError(bad)
    sums = np.zeros((J, matrix.shape[1]))
    np.add.at(sums, dataset.cluster[focal], matrix[focal])
    means = np.divide(sums, counts[:, None], out=np.zeros_like(sums),
                      where=counts[:, None] > 0)
    mass = counts / n1
    # Rebuild the overall mean from the mixture so the identity is exact.
    return TargetDistribution(
        cluster_mass=mass,
        within_cluster_means=means,
        overall_mean=mass @ means,
        focal_counts=counts,
        cluster_labels=dataset.cluster_labels,
        clustered=True,
    )


def top_code_outcome(dataset: AnalysisDataset, cap: float, outcome=None):
    """Replace outcomes above ``cap`` by ``cap``.

    Returns ``(new_dataset, fraction_affected)``.
    """
    cap = float(cap)
    if not math.isfinite(cap):
        raise ValidationError('top-code cap must be finite')
    name = outcome or dataset.outcome_name
    y = dataset.outcomes[name]
    affected = y > cap
    outcomes = dict(dataset.outcomes)
    outcomes[name] = np.minimum(y, cap)
    frac = float(affected.mean()) if dataset.n else 0.0
    return dataclasses.replace(dataset, outcomes=outcomes), frac


@dataclasses.dataclass(eq=False)
class WeightVector:
    """Weights on the comparison rows of a dataset (probability scale)."""

    weights: np.ndarray
    bound_mode: str
    lam: float = 0.0
    cluster: Optional[np.ndarray] = None
    n_clusters: int = 1
    solver_report: dict = dataclasses.field(default_factory=dict)
    method: str = 'balancing'
    solver_state: Optional[tuple] = dataclasses.field(default=None, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if self.bound_mode not in ('restricted', 'unrestricted'):
            raise ValueError(f'unknown bound mode {self.bound_mode!r}')
        if self.lam < 0:
            raise ValueError('lambda must be nonnegative')
        if self.cluster is not None:
            self.cluster = np.asarray(self.cluster, dtype=np.int64)
            if self.cluster.shape != self.weights.shape:
                raise ValueError('cluster codes must align with weights')

    def __len__(self):
        return self.weights.shape[0]

    @property
    def total(self):
        return float(self.weights.sum())

    @property
    def normalization(self):
        """Per-cluster weight sums (a length-1 array when unclustered)."""
        if self.cluster is None:
            return np.array([self.total])
        return np.bincount(self.cluster, weights=self.weights,
                           minlength=self.n_clusters)
