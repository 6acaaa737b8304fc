"""Interaction screening with a random forest grown on a held-out sample.

The pair score is the adjacent-split gain: every split on variable ``b``
whose parent node splits on ``a`` contributes its impurity reduction to pair
``(a, b)``. Scores are symmetrized over the two orders and normalized by the
total impurity reduction of the forest, so they sum to at most one.
"""

import dataclasses
import logging
import math

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from balweights.basis import Interaction
from balweights.errors import DegenerateInputError, ValidationError

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class ForestConfig:
    """Forest hyperparameters; ``feature_subsample=None`` means sqrt(d)/d."""

    n_trees: int = 200
    max_depth: int = 6
    min_leaf: int = 5
    feature_subsample: float = None
    bootstrap: bool = True
    seed: int = 0

    def __post_init__(self):
        for name in ('n_trees', 'max_depth', 'min_leaf'):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValidationError(f'{name} must be a positive integer')
        fs = self.feature_subsample
        if fs is not None and not 0 < fs <= 1:
            raise ValidationError('feature_subsample must lie in (0, 1]')
        if not 0 <= int(self.seed) < 2 ** 64:
            raise ValidationError('seed must be a 64-bit unsigned integer')

    def subsample_for(self, d):
        return self.feature_subsample if self.feature_subsample else math.sqrt(d) / d


@dataclasses.dataclass(frozen=True)
class InteractionScore:
    pair: tuple
    score: float
    rank: int


@dataclasses.dataclass(frozen=True)
class ScreeningProvenance:
    """Row ids used for screening; they must not reach the analysis."""

    screen_row_ids: frozenset
    seed: int
    fraction: float


def split_sample(dataset, screen_fraction, seed=0):
    """Random partition into ``(screen, analysis)``.

    The screen sample has ``round(fraction * n)`` rows.
    """
    if not 0 < screen_fraction < 1:
        raise ValidationError('screen_fraction must lie in (0, 1)')
    n = dataset.n
    if n == 0:
        raise ValidationError('cannot split an empty dataset')
    k = int(round(screen_fraction * n))
    if k == 0:
        raise ValidationError(f'screen fraction {screen_fraction} of {n} rows '
                              'gives an empty screen sample')
    if k == n:
        raise ValidationError(f'screen fraction {screen_fraction} of {n} rows '
                              'leaves no analysis rows')
    if screen_fraction >= 0.5:
        logger.warning('screen fraction %.3g leaves a small analysis sample '
                       '(%d of %d rows)', screen_fraction, n - k, n)
    perm = np.random.default_rng(seed).permutation(n)
    screen_idx = np.sort(perm[:k])
    analysis_idx = np.sort(perm[k:])
    return dataset.subset(screen_idx), dataset.subset(analysis_idx)


def provenance_for(screen, seed, fraction):
    return ScreeningProvenance(frozenset(str(r) for r in screen.row_ids), seed, fraction)


@dataclasses.dataclass
class Forest:
    model: RandomForestRegressor
    feature_names: tuple
    config: ForestConfig

    @property
    def trees(self):
        return [est.tree_ for est in self.model.estimators_]

    @property
    def oob_r2(self):
        return getattr(self.model, 'oob_score_', None)


def train_forest(X, y, feature_names, config: ForestConfig = ForestConfig(),
                 oob_score=False, n_jobs=1) -> Forest:
    """Grow a regression forest on ``X`` (rows) and ``y``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValidationError('design and outcome differ in length')
    if X.shape[0] < 2 * config.min_leaf:
        raise DegenerateInputError(
            f'forest needs at least {2 * config.min_leaf} rows, got {X.shape[0]}')
    if np.ptp(y) == 0:
        raise DegenerateInputError('outcome has zero variance; nothing to predict')
    d = X.shape[1]
    model = RandomForestRegressor(
        n_estimators=config.n_trees, criterion='squared_error',
        max_depth=config.max_depth, min_samples_leaf=config.min_leaf,
        max_features=config.subsample_for(d), bootstrap=config.bootstrap,
        oob_score=bool(oob_score and config.bootstrap),
        random_state=int(config.seed) % (2 ** 32), n_jobs=n_jobs)
    model.fit(X, y)
    return Forest(model=model, feature_names=tuple(feature_names), config=config)


def train_forest_on(dataset, config: ForestConfig = ForestConfig(), outcome=None):
    """Forest predicting ``outcome`` (default: the primary one) from the covariates."""
    y = dataset.outcomes[outcome or dataset.outcome_name]
    return train_forest(dataset.covariates, y, dataset.covariate_names, config)


def _node_gain(tree, node):
    w = tree.weighted_n_node_samples
    imp = tree.impurity
    lc, rc = tree.children_left[node], tree.children_right[node]
    return w[node] * imp[node] - w[lc] * imp[lc] - w[rc] * imp[rc]


def pair_gains(forest: Forest):
    """Raw (d, d) matrix of parent-feature -> child-feature gains, and total gain."""
    d = len(forest.feature_names)
    G = np.zeros((d, d))
    total = 0.0
    for tree in forest.trees:
        left, right, feat = tree.children_left, tree.children_right, tree.feature
        for node in range(tree.node_count):
            if left[node] == -1:
                continue
            total += _node_gain(tree, node)
            for child in (left[node], right[node]):
                if left[child] != -1 and feat[child] != feat[node]:
                    G[feat[node], feat[child]] += _node_gain(tree, child)
    return G, total


def score_interactions(forest: Forest):
    """Ranked pair scores; empty when the forest has no splits or one feature."""
    names = forest.feature_names
    d = len(names)
    if d < 2:
        return []
    G, total = pair_gains(forest)
    if total <= 0:
        return []
    S = (G + G.T) / total
    items = []
    for a in range(d):
        for b in range(a + 1, d):
            pair = tuple(sorted((names[a], names[b])))
            items.append((pair, max(float(S[a, b]), 0.0)))
    items.sort(key=lambda t: (-t[1], t[0]))
    return [InteractionScore(pair=p, score=s, rank=i + 1) for i, (p, s) in enumerate(items)]


def select_top_k(scores, k):
    """First ``min(k, len(scores))`` pairs as :class:`Interaction` terms."""
    if k < 0:
        raise ValidationError('k must be nonnegative')
    ordered = sorted(scores, key=lambda s: (-s.score, s.pair))
    return [Interaction(*s.pair) for s in ordered[:k]]
