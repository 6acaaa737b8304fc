"""Run configuration read from a TOML file with strict key checking.

Relative paths are resolved against the directory holding the config file.
"""

import dataclasses
import os
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from balweights.balance.admm import SolverSettings
from balweights.basis import BasisSpec
from balweights.data import ColumnSchema
from balweights.errors import ConfigError
from balweights.screening import ForestConfig

BOUND_MODES = ('restricted', 'unrestricted')
SOLVE_MODES = ('auto', 'clustered', 'unclustered')


@dataclasses.dataclass(frozen=True)
class DataSection:
    path: str
    group: str
    outcomes: tuple
    covariates: tuple
    cluster: Optional[str] = None
    id: Optional[str] = None
    top_code: Optional[float] = None
    analysis_ids: Optional[str] = None

    @property
    def schema(self):
        return ColumnSchema(group=self.group, outcomes=self.outcomes,
                            covariates=self.covariates, cluster=self.cluster,
                            id=self.id)


@dataclasses.dataclass(frozen=True)
class BasisSection:
    terms: tuple = ()
    drop_constant: bool = True
    provenance: Optional[str] = None

    def spec(self, covariates):
        return BasisSpec.parse(self.terms) if self.terms else BasisSpec.raw(covariates)


@dataclasses.dataclass(frozen=True)
class ScreenerSection:
    fraction: float = 0.025
    k: int = 12
    seed: int = 0
    outcome: Optional[str] = None
    forest: ForestConfig = ForestConfig()


@dataclasses.dataclass(frozen=True)
class SolveSection:
    lam: float = 1.0
    bounds: tuple = ('restricted',)
    mode: str = 'auto'
    lambda_grid: tuple = (0.0, 1.0, 10.0, 100.0)
    solver: SolverSettings = SolverSettings()


@dataclasses.dataclass(frozen=True)
class EstimateSection:
    outcomes: tuple = ()
    scales: tuple = ('difference',)
    alpha: float = 0.05
    se_method: str = 'rve'
    ridge_penalty: float = 1.0


@dataclasses.dataclass(frozen=True)
class OutputSection:
    directory: str = 'output'
    emit_svg: bool = False


@dataclasses.dataclass(frozen=True)
class RunConfig:
    data: DataSection
    basis: BasisSection
    screener: ScreenerSection
    solve: SolveSection
    estimate: EstimateSection
    output: OutputSection
    source: Optional[str] = None
    raw: dict = dataclasses.field(default_factory=dict, compare=False)

    @property
    def estimate_outcomes(self):
        return self.estimate.outcomes or self.data.outcomes


_SECTIONS = {
    'data': {'path', 'group', 'outcomes', 'outcome', 'covariates', 'cluster', 'id',
             'top_code', 'analysis_ids'},
    'basis': {'terms', 'drop_constant', 'provenance'},
    'screener': {'fraction', 'k', 'seed', 'outcome', 'n_trees', 'max_depth',
                 'min_leaf', 'feature_subsample', 'bootstrap'},
    'solve': {'lambda', 'bounds', 'mode', 'lambda_grid', 'solver'},
    'estimate': {'outcomes', 'scales', 'alpha', 'se_method', 'ridge_penalty'},
    'output': {'directory', 'emit_svg'},
}


def _check_keys(where, table, allowed):
    if not isinstance(table, dict):
        raise ConfigError(f'[{where}] must be a table')
    unknown = sorted(set(table) - allowed)
    if unknown:
        raise ConfigError(f'unknown key(s) in [{where}]: {", ".join(unknown)}')


def _str_list(where, value):
    if isinstance(value, str):
        value = [value]
    if not isinstance(value, (list, tuple)) or not all(isinstance(v, str) for v in value):
        raise ConfigError(f'{where} must be a string or a list of strings')
    return tuple(value)


def _number(where, value, integer=False):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f'{where} must be a number')
    if integer and int(value) != value:
        raise ConfigError(f'{where} must be an integer')
    return int(value) if integer else float(value)


def _resolve(base, path):
    if path is None or os.path.isabs(path):
        return path
    return os.path.normpath(os.path.join(base, path))


def parse_config(raw: dict, base_dir='.') -> RunConfig:
    """Validate a parsed TOML document; raises ConfigError on any problem."""
    _check_keys('top level', raw, set(_SECTIONS))
    for name, allowed in _SECTIONS.items():
        _check_keys(name, raw.get(name, {}), allowed)

    d = raw.get('data')
    if not d:
        raise ConfigError('missing [data] section')
    for key in ('path', 'group', 'covariates'):
        if key not in d:
            raise ConfigError(f'[data] needs {key!r}')
    if 'outcome' in d and 'outcomes' in d:
        raise ConfigError("[data] takes 'outcome' or 'outcomes', not both")
    outcomes = _str_list('[data] outcomes', d.get('outcomes', d.get('outcome', [])))
    if not outcomes:
        raise ConfigError('[data] needs at least one outcome')
    data = DataSection(
        path=_resolve(base_dir, d['path']), group=d['group'], outcomes=outcomes,
        covariates=_str_list('[data] covariates', d['covariates']),
        cluster=d.get('cluster'), id=d.get('id'),
        top_code=_number('[data] top_code', d['top_code']) if 'top_code' in d else None,
        analysis_ids=_resolve(base_dir, d.get('analysis_ids')))

    b = raw.get('basis', {})
    basis = BasisSection(terms=_str_list('[basis] terms', b.get('terms', [])),
                         drop_constant=bool(b.get('drop_constant', True)),
                         provenance=_resolve(base_dir, b.get('provenance')))
    try:
        if basis.terms:
            BasisSpec.parse(basis.terms)
    except Exception as exc:
        raise ConfigError(f'[basis] {exc}') from exc

    s = raw.get('screener', {})
    forest_keys = ('n_trees', 'max_depth', 'min_leaf', 'feature_subsample', 'bootstrap')
    try:
        forest = ForestConfig(seed=int(s.get('seed', 0)),
                              **{k: s[k] for k in forest_keys if k in s})
    except Exception as exc:
        raise ConfigError(f'[screener] {exc}') from exc
    screener = ScreenerSection(
        fraction=_number('[screener] fraction', s.get('fraction', 0.025)),
        k=_number('[screener] k', s.get('k', 12), integer=True),
        seed=forest.seed, outcome=s.get('outcome'), forest=forest)
    if not 0 < screener.fraction < 1:
        raise ConfigError('[screener] fraction must lie in (0, 1)')
    if screener.k < 0:
        raise ConfigError('[screener] k must be nonnegative')

    v = raw.get('solve', {})
    bounds = _str_list('[solve] bounds', v.get('bounds', ['restricted']))
    bad = [x for x in bounds if x not in BOUND_MODES]
    if bad or not bounds:
        raise ConfigError(f'[solve] bounds must be drawn from {BOUND_MODES}')
    mode = v.get('mode', 'auto')
    if mode not in SOLVE_MODES:
        raise ConfigError(f'[solve] mode must be one of {SOLVE_MODES}')
    try:
        solver = SolverSettings.from_mapping(v.get('solver', {}))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f'[solve.solver] {exc}') from exc
    lam = _number('[solve] lambda', v.get('lambda', 1.0))
    grid = tuple(_number('[solve] lambda_grid', x)
                 for x in v.get('lambda_grid', SolveSection.lambda_grid))
    if lam < 0 or any(x < 0 for x in grid):
        raise ConfigError('[solve] lambda values must be nonnegative')
    solve = SolveSection(lam=lam, bounds=tuple(dict.fromkeys(bounds)), mode=mode,
                         lambda_grid=grid, solver=solver)

    e = raw.get('estimate', {})
    scales = _str_list('[estimate] scales', e.get('scales', ['difference']))
    if any(x not in ('difference', 'risk_ratio') for x in scales):
        raise ConfigError("[estimate] scales must be 'difference' or 'risk_ratio'")
    se_method = e.get('se_method', 'rve')
    if se_method not in ('rve', 'hc2'):
        raise ConfigError("[estimate] se_method must be 'rve' or 'hc2'")
    est_outcomes = _str_list('[estimate] outcomes', e.get('outcomes', []))
    missing = [o for o in est_outcomes if o not in data.outcomes]
    if missing:
        raise ConfigError(f'[estimate] outcomes not declared in [data]: {missing}')
    alpha = _number('[estimate] alpha', e.get('alpha', 0.05))
    if not 0 < alpha < 1:
        raise ConfigError('[estimate] alpha must lie in (0, 1)')
    ridge = _number('[estimate] ridge_penalty', e.get('ridge_penalty', 1.0))
    if not ridge > 0:
        raise ConfigError('[estimate] ridge_penalty must be positive')
    estimate = EstimateSection(outcomes=est_outcomes, scales=scales, alpha=alpha,
                               se_method=se_method, ridge_penalty=ridge)

    o = raw.get('output', {})
    output = OutputSection(directory=_resolve(base_dir, o.get('directory', 'output')),
                           emit_svg=bool(o.get('emit_svg', False)))
    return RunConfig(data=data, basis=basis, screener=screener, solve=solve,
                     estimate=estimate, output=output, raw=raw)


def load_config(path) -> RunConfig:
    try:
        with open(path, 'rb') as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f'cannot read config {path}: {exc}') from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f'invalid TOML in {path}: {exc}') from exc
    cfg = parse_config(raw, base_dir=os.path.dirname(os.path.abspath(path)))
    return dataclasses.replace(cfg, source=os.path.abspath(path))
