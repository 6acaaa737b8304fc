"""Data-generating process for the simulation studies.

Five independent standard normal covariates; membership in the focal group
follows a latent index whose slope is divided by the overlap parameter ``c``
(large ``c`` means good overlap). The outcome depends on X2 and X3 only, with
an additive focal-group effect of 5.
"""

import dataclasses

import numpy as np

from balweights.data import AnalysisDataset

TRUE_EFFECT = 5.0
N_COVARIATES = 5


@dataclasses.dataclass(frozen=True)
class DgpConfig:
    n: int = 1000
    c: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.n < 10:
            raise ValueError('n must be at least 10')
        if not self.c > 0:
            raise ValueError('c must be positive')


def latent_index(X, c, u):
    return (1.5 * X[:, 0] + 1.5 * X[:, 1] + 0.7 * X[:, 0] * X[:, 1]) / c + u


def draw(rng, n, c):
    """Raw arrays ``(X, G, Y)`` for one sample drawn from ``rng``."""
    X = rng.standard_normal((n, N_COVARIATES))
    u = rng.uniform(-0.5, 0.5, size=n)
    G = (latent_index(X, c, u) > 0).astype(np.int8)
    eps = rng.standard_normal(n)
    Y = TRUE_EFFECT * G + X[:, 1] + X[:, 2] + eps
    return X, G, Y


def generate_sample(config: DgpConfig, rng=None) -> AnalysisDataset:
    """One unclustered sample; deterministic given ``config.seed``."""
    if rng is None:
        rng = np.random.default_rng(config.seed)
    X, G, Y = draw(rng, config.n, config.c)
    return AnalysisDataset(
        group=G,
        outcomes={'y': Y},
        covariates=X,
        covariate_names=tuple(f'x{k + 1}' for k in range(N_COVARIATES)),
        outcome_name='y',
    )
