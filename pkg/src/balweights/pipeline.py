"""Stages behind the command-line subcommands.

Each stage runs inside :func:`stage`, which tags any failure with the stage
name so the CLI can report where a run stopped.
"""

import contextlib
import dataclasses
import datetime
import importlib.resources
import io
import logging
import os
import platform

import numpy as np

from balweights import __version__
from balweights.balance.problem import assemble_problem, solve_admm
from balweights.basis import expand
from balweights.config import RunConfig
from balweights.data import empirical_target, load_dataset, top_code_outcome
from balweights.diagnostics import balance_report, sweep_lambda
from balweights.errors import (BalweightsError, InputError, LeakageError, NoOverlapError,
                               ValidationError)
from balweights.estimators import estimate_disparity, fit_outcome_model
from balweights.report import write_csv, write_json, write_svg
from balweights.screening import (provenance_for, score_interactions, select_top_k,
                                  split_sample, train_forest)

logger = logging.getLogger(__name__)

ESTIMATE_COLUMNS = ('outcome', 'scale', 'point', 'se', 'ci_low', 'ci_high', 'method',
                    'lambda', 'bound_mode')
BALANCE_COLUMNS = ('bound_mode', 'covariate', 'cluster', 'delta_before', 'delta_after',
                   'skipped_flag')
SWEEP_COLUMNS = ('bound_mode', 'lambda', 'pbr', 'pbr_h', 'ess', 'status', 'iterations')
STUDY1_COLUMNS = ('lambda', 'method', 'c', 'pbr', 'ess', 'n_excluded')
STUDY2_COLUMNS = ('c', 'lambda', 'se_method', 'bias', 'mean_se', 'coverage', 'mc_se',
                  'n_excluded')
SCREEN_COLUMNS = ('pair', 'score', 'rank')


class StageError(Exception):
    """A failure inside a named pipeline stage."""

    def __init__(self, stage_name, error):
        self.stage = stage_name
        self.error = error
        self.exit_code = 2 if isinstance(error, (InputError, FileNotFoundError)) else 1
        super().__init__(f'[{stage_name}] {error}')


@contextlib.contextmanager
def stage(name):
    try:
        yield
    except StageError:
        raise
    except (BalweightsError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        raise StageError(name, exc) from exc


def toy_paths():
    """Paths of the bundled toy dataset and its config."""
    root = importlib.resources.files('balweights') / 'resources'
    return str(root / 'toy.csv'), str(root / 'toy.toml')


# Shared preparation ---------------------------------------------------------

@dataclasses.dataclass
class Prepared:
    dataset: object
    design: object
    target: object
    mode: str
    top_coded: dict


def _read_ids(path):
    with open(path, encoding='utf-8') as fh:
        return [ln.strip() for ln in fh if ln.strip() and not ln.startswith('#')]


def _write_ids(path, ids):
    with open(path, 'w', encoding='utf-8') as fh:
        for rid in ids:
            fh.write(f'{rid}\n')


def load_data(cfg: RunConfig, restrict=True):
    """Dataset after top coding and (optionally) the analysis-row filter."""
    with stage('data'):
        ds = load_dataset(cfg.data.path, cfg.data.schema)
        top_coded = {}
        if cfg.data.top_code is not None:
            for name in cfg.data.outcomes:
                ds, frac = top_code_outcome(ds, cfg.data.top_code, outcome=name)
                top_coded[name] = frac
        if restrict and cfg.data.analysis_ids:
            keep = set(_read_ids(cfg.data.analysis_ids))
            mask = np.array([str(r) in keep for r in ds.row_ids])
            if not mask.any():
                raise ValidationError('no rows of the dataset are listed in analysis_ids')
            ds = ds.subset(mask)
    return ds, top_coded


def check_leakage(dataset, provenance_path):
    """Raise LeakageError if any screen row appears in ``dataset``."""
    screen = set(_read_ids(provenance_path))
    leaked = sorted({str(r) for r in dataset.row_ids} & screen)
    if leaked:
        raise LeakageError(
            f'{len(leaked)} screening row(s) are present in the analysis sample '
            f'(first: {leaked[0]}); restrict the data with [data] analysis_ids')


def prepare(cfg: RunConfig) -> Prepared:
    ds, top_coded = load_data(cfg)
    with stage('basis'):
        spec = cfg.basis.spec(ds.covariate_names)
        spec.validate(ds)
        if cfg.basis.provenance:
            check_leakage(ds, cfg.basis.provenance)
        design = expand(ds, spec, drop_constant=cfg.basis.drop_constant)
    with stage('target'):
        mode = cfg.solve.mode
        if mode == 'auto':
            mode = 'clustered' if ds.clustered else 'unclustered'
        if mode == 'clustered' and not ds.clustered:
            raise ValidationError("mode 'clustered' needs a [data] cluster column")
        if mode == 'unclustered' and ds.clustered:
            ds = dataclasses.replace(ds, cluster=None, cluster_labels=())
        target = empirical_target(ds, design)
    return Prepared(ds, design, target, mode, top_coded)


def _solve(prep: Prepared, cfg: RunConfig, bound_mode, lam):
    ds = prep.dataset
    c = ds.comparison
    cluster = ds.cluster[c] if prep.mode == 'clustered' else None
    problem = assemble_problem(prep.design.matrix[c], cluster, prep.target, lam,
                               bound_mode, prep.mode)
    w = solve_admm(problem, cfg.solve.solver)
    status = w.solver_report['status']
    if status != 'solved':
        raise BalweightsError(f'{bound_mode} solve ended with status {status!r} '
                              f'after {w.solver_report["iterations"]} iterations')
    return w


def _public_report(report):
    return {k: v for k, v in report.items() if k != 'solver_state'}


def _versions():
    import scipy
    import sklearn
    return {'balweights': __version__, 'python': platform.python_version(),
            'numpy': np.__version__, 'scipy': scipy.__version__,
            'scikit-learn': sklearn.__version__}


def _meta(cfg, command, reproducible, **extra):
    meta = {'command': command, 'config_file': cfg.source if cfg else None,
            'config': cfg.raw if cfg else None, 'versions': _versions(), **extra}
    if not reproducible:
        meta['generated'] = datetime.datetime.now(datetime.timezone.utc).isoformat(
            timespec='seconds')
    return meta


# estimate -------------------------------------------------------------------

def run_estimate(cfg: RunConfig, reproducible=False, out_dir=None):
    """Weights, disparity estimates and balance diagnostics; returns written paths."""
    out_dir = out_dir or cfg.output.directory
    prep = prepare(cfg)
    ds = prep.dataset
    c = ds.comparison
    f = ds.focal
    phi_c = prep.design.matrix[c]
    cluster_c = ds.cluster[c] if prep.mode == 'clustered' else None
    J = prep.target.n_clusters
    weights = {}
    with stage('solve'):
        for mode in cfg.solve.bounds:
            weights[mode] = _solve(prep, cfg, mode, cfg.solve.lam)

    estimates, fits = [], {}
    with stage('estimate'):
        for mode, w in weights.items():
            for name in cfg.estimate_outcomes:
                y = ds.outcomes[name]
                fit = None
                if cfg.estimate.se_method == 'rve':
                    fit = fit_outcome_model(phi_c, y[c], w, cluster_c, J,
                                            cfg.estimate.ridge_penalty)
                    fits[(mode, name)] = fit.report()
                for scale in cfg.estimate.scales:
                    est = estimate_disparity(y[f], y[c], w, scale=scale,
                                             se_method=cfg.estimate.se_method, fit=fit,
                                             alpha=cfg.estimate.alpha)
                    estimates.append({
                        'outcome': name, 'scale': scale, 'point': est.point,
                        'se': est.se, 'ci_low': est.ci_low, 'ci_high': est.ci_high,
                        'method': cfg.estimate.se_method, 'lambda': w.lam,
                        'bound_mode': mode})

    with stage('diagnostics'):
        reports = {mode: balance_report(ds, prep.design, w) for mode, w in weights.items()}

    with stage('output'):
        paths = {}
        paths['estimates'] = write_csv(os.path.join(out_dir, 'estimates.csv'),
                                       ESTIMATE_COLUMNS, estimates, reproducible)
        rows = [(mode, *r) for mode, rep in reports.items() for r in rep.rows()]
        paths['balance'] = write_csv(os.path.join(out_dir, 'balance.csv'),
                                     BALANCE_COLUMNS, rows, reproducible)
        labels = (np.asarray(ds.cluster_labels, dtype=object)[ds.cluster[c]]
                  if prep.mode == 'clustered' else np.full(c.sum(), 'ALL', dtype=object))
        n1 = ds.n_focal
        cols = ('id', 'cluster') + tuple(f'weight_{m}' for m in weights)
        wrows = [(rid, lab, *(float(weights[m].weights[i]) * n1 for m in weights))
                 for i, (rid, lab) in enumerate(zip(ds.row_ids[c], labels))]
        paths['weights'] = write_csv(os.path.join(out_dir, 'weights.csv'), cols, wrows,
                                     reproducible)
        summary = {}
        for mode, rep in reports.items():
            summary[mode] = {'pbr': rep.pbr, 'pbr_h': rep.pbr_h, 'ess': rep.ess_total,
                             'max_weight': rep.max_weight,
                             'extrapolation_pct': rep.extrapolation_pct,
                             'notes': list(rep.notes)}
        meta = _meta(cfg, 'estimate', reproducible,
                     n_rows=ds.n, n_focal=ds.n_focal, n_comparison=ds.n_comparison,
                     mode=prep.mode, basis_columns=list(prep.design.column_names),
                     dropped_columns=list(prep.design.dropped),
                     top_coded_fraction=prep.top_coded,
                     weight_scale='count (weights sum to the number of focal rows)',
                     solver={m: _public_report(w.solver_report) for m, w in weights.items()},
                     outcome_model=fits, balance=summary)
        paths['run_meta'] = write_json(os.path.join(out_dir, 'run_meta.json'), meta)
        if cfg.output.emit_svg:
            for mode, rep in reports.items():
                order = np.arange(len(rep.names))
                paths[f'balance_{mode}_svg'] = write_svg(
                    os.path.join(out_dir, f'balance_{mode}.svg'),
                    {'before': (order, np.abs(rep.delta_before.delta)),
                     'after': (order, np.abs(rep.delta_after.delta))},
                    'basis column', '|standardized difference|', f'balance ({mode})')
    return paths


# sweep ----------------------------------------------------------------------

def _fmt_pbr(v):
    return v if v is None or isinstance(v, str) else float(v)


def run_sweep(cfg: RunConfig, lambda_grid=None, reproducible=False, out_dir=None):
    """PBR/ESS along a lambda grid per bound mode.

    Returns ``(paths, all_failed)``.
    """
    out_dir = out_dir or cfg.output.directory
    grid = sorted(float(v) for v in (lambda_grid or cfg.solve.lambda_grid))
    try:
        prep = prepare(cfg)
    except StageError as exc:
        if not isinstance(exc.error, NoOverlapError):
            raise
        # Every grid point is infeasible: record that per row and report failure.
        rows = [{'bound_mode': mode, 'lambda': lam, 'status': f'error: {exc.error}',
                 'iterations': 0} for mode in cfg.solve.bounds for lam in grid]
        with stage('output'):
            path = write_csv(os.path.join(out_dir, 'sweep.csv'), SWEEP_COLUMNS, rows,
                             reproducible)
        return {'sweep': path}, True
    rows = []
    with stage('sweep'):
        per_mode = {}
        for mode in cfg.solve.bounds:
            per_mode[mode] = sweep_lambda(prep.dataset, prep.design, prep.target, grid,
                                          mode, prep.mode, cfg.solve.solver)
            for r in per_mode[mode]:
                rows.append({'bound_mode': mode, 'lambda': r.lam, 'pbr': _fmt_pbr(r.pbr),
                             'pbr_h': _fmt_pbr(r.pbr_h), 'ess': r.ess,
                             'status': r.status, 'iterations': r.iterations})
    with stage('output'):
        paths = {'sweep': write_csv(os.path.join(out_dir, 'sweep.csv'), SWEEP_COLUMNS,
                                    rows, reproducible)}
        if cfg.output.emit_svg:
            for mode, srows in per_mode.items():
                lam = np.array([r.lam for r in srows])
                num = [v if isinstance(v, (int, float)) and not isinstance(v, bool)
                       else np.nan for v in (r.pbr for r in srows)]
                series = {'PBR': (lam, num)}
                if prep.mode == 'clustered':
                    series['PBR within clusters'] = (
                        lam, [v if isinstance(v, (int, float)) else np.nan
                              for v in (r.pbr_h for r in srows)])
                paths[f'pbr_{mode}'] = write_svg(
                    os.path.join(out_dir, f'sweep_pbr_{mode}.svg'), series, 'lambda',
                    'PBR (%)', f'bias reduction ({mode})')
                paths[f'ess_{mode}'] = write_svg(
                    os.path.join(out_dir, f'sweep_ess_{mode}.svg'),
                    {'ESS': (lam, [r.ess for r in srows])}, 'lambda',
                    'effective sample size', f'effective sample size ({mode})')
        write_json(os.path.join(out_dir, 'run_meta.json'),
                   _meta(cfg, 'sweep', reproducible, lambda_grid=grid, mode=prep.mode))
    all_failed = all(r['status'] != 'solved' for r in rows)
    return paths, all_failed


# simulate -------------------------------------------------------------------

def run_simulation(study, study_config, out_dir, reproducible=False, emit_svg=False):
    """Run the design or inference study and write its table."""
    from balweights.simulation.studies import run_design_study, run_inference_study
    with stage('simulate'):
        if study == 'design':
            res = run_design_study(study_config)
            name, cols = 'study1.csv', STUDY1_COLUMNS
        elif study == 'inference':
            res = run_inference_study(study_config)
            name, cols = 'study2.csv', STUDY2_COLUMNS
        else:
            raise ValidationError(f'unknown study {study!r}')
    with stage('output'):
        paths = {'table': write_csv(os.path.join(out_dir, name), cols, res.table,
                                    reproducible)}
        failures = {f'{k}': v for k, v in res.failures.items()}
        sc = study_config
        write_json(os.path.join(out_dir, f'{os.path.splitext(name)[0]}_meta.json'),
                   _meta(None, f'simulate {study}', reproducible,
                         seed=sc.dgp.seed, n=sc.dgp.n, replications=sc.replications,
                         c_grid=list(sc.overlap_levels), lambda_grid=list(sc.lambda_grid),
                         failures=failures))
        if emit_svg:
            paths.update(_study_svgs(study, res.table, out_dir))
    return paths


def _study_svgs(study, table, out_dir):
    paths = {}
    cs = sorted({r['c'] for r in table})
    for c in cs:
        rows = [r for r in table if r['c'] == c]
        if study == 'design':
            for metric in ('pbr', 'ess'):
                series = {}
                for m in dict.fromkeys(r['method'] for r in rows):
                    mr = [r for r in rows if r['method'] == m]
                    series[m] = ([r['lambda'] for r in mr], [r[metric] for r in mr])
                paths[f'{metric}_{c:g}'] = write_svg(
                    os.path.join(out_dir, f'study1_{metric}_c{c:g}.svg'), series,
                    'lambda', metric.upper(), f'design study, c={c:g}')
        else:
            series = {}
            for m in dict.fromkeys(r['se_method'] for r in rows):
                mr = [r for r in rows if r['se_method'] == m]
                series[m] = ([r['lambda'] for r in mr], [r['coverage'] for r in mr])
            paths[f'coverage_{c:g}'] = write_svg(
                os.path.join(out_dir, f'study2_coverage_c{c:g}.svg'), series,
                'lambda', 'coverage', f'inference study, c={c:g}')
    return paths


# screen ---------------------------------------------------------------------

@dataclasses.dataclass
class ScreenResult:
    scores: list
    selected: list
    basis_snippet: str
    paths: dict


def run_screen(cfg: RunConfig, seed=None, reproducible=False, out_dir=None, n_jobs=1):
    """Split, grow a forest on the screen rows, rank pairs and pick the top k."""
    out_dir = out_dir or cfg.output.directory
    seed = cfg.screener.seed if seed is None else int(seed)
    ds, _ = load_data(cfg, restrict=False)
    with stage('screen'):
        screen, analysis = split_sample(ds, cfg.screener.fraction, seed)
        outcome = cfg.screener.outcome or cfg.data.outcomes[0]
        if outcome not in ds.outcomes:
            raise ValidationError(f'screener outcome {outcome!r} is not a [data] outcome')
        forest_cfg = dataclasses.replace(cfg.screener.forest, seed=seed)
        forest = train_forest(screen.covariates, screen.outcomes[outcome],
                              screen.covariate_names, forest_cfg, n_jobs=n_jobs)
        scores = score_interactions(forest)
        selected = select_top_k(scores, cfg.screener.k)
    with stage('output'):
        os.makedirs(out_dir, exist_ok=True)
        top = scores[:len(selected)]
        paths = {'interactions': write_csv(
            os.path.join(out_dir, 'interactions.csv'), SCREEN_COLUMNS,
            [(f'{s.pair[0]}:{s.pair[1]}', s.score, s.rank) for s in top], reproducible)}
        paths['analysis_ids'] = os.path.join(out_dir, 'analysis_ids.txt')
        _write_ids(paths['analysis_ids'], [str(r) for r in analysis.row_ids])
        paths['screen_ids'] = os.path.join(out_dir, 'screen_ids.txt')
        prov = provenance_for(screen, seed, cfg.screener.fraction)
        _write_ids(paths['screen_ids'], sorted(prov.screen_row_ids))
        base_terms = list(cfg.basis.terms) or list(ds.covariate_names)
        have = set(base_terms)
        terms = base_terms + [t.label() for t in selected if t.label() not in have]
        snippet = io.StringIO()
        snippet.write('[basis]\n')
        snippet.write('terms = [' + ', '.join(f'"{t}"' for t in terms) + ']\n')
        snippet.write(f'provenance = "{os.path.abspath(paths["screen_ids"])}"\n')
        snippet.write('# and in [data]:\n')
        snippet.write(f'# analysis_ids = "{os.path.abspath(paths["analysis_ids"])}"\n')
        write_json(os.path.join(out_dir, 'screen_meta.json'),
                   _meta(cfg, 'screen', reproducible, seed=seed,
                         fraction=cfg.screener.fraction, n_screen=screen.n,
                         n_analysis=analysis.n, outcome=outcome,
                         forest=dataclasses.asdict(forest_cfg)))
    return ScreenResult(scores=scores, selected=selected, basis_snippet=snippet.getvalue(),
                        paths=paths)
