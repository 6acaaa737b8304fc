import csv
import logging
import os
import shutil

import numpy as np
import pytest

from balweights.cli import main
from balweights.pipeline import toy_paths
from balweights.report import read_csv

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib


def _toml_value(v):
    if isinstance(v, bool):
        return 'true' if v else 'false'
    if isinstance(v, str):
        return f'"{v}"'
    if isinstance(v, (list, tuple)):
        return '[' + ', '.join(_toml_value(x) for x in v) + ']'
    return repr(v)


def write_config(path, raw):
    with open(path, 'w', encoding='utf-8') as fh:
        for section, table in raw.items():
            fh.write(f'[{section}]\n')
            for k, v in table.items():
                fh.write(f'{k} = {_toml_value(v)}\n')
            fh.write('\n')
    return str(path)


@pytest.fixture
def toy(tmp_path):
    """Copy of the bundled toy config and data; returns (dir, raw config)."""
    data, config = toy_paths()
    shutil.copy(data, tmp_path / 'toy.csv')
    with open(config, 'rb') as fh:
        raw = tomllib.load(fh)
    raw['output']['directory'] = str(tmp_path / 'out')
    return tmp_path, raw


def test_estimate_on_toy_data(toy, capsys):
    d, raw = toy
    cfg = write_config(d / 'run.toml', raw)
    assert main(['--config', cfg, '--reproducible', 'estimate']) == 0
    out = d / 'out'
    for name in ('estimates.csv', 'balance.csv', 'weights.csv', 'run_meta.json'):
        assert (out / name).exists()
    est = read_csv(out / 'estimates.csv')
    assert len(est) == 2 * 2 * 2
    assert {r['bound_mode'] for r in est} == {'restricted', 'unrestricted'}
    assert all(float(r['ci_low']) <= float(r['point']) <= float(r['ci_high']) for r in est)
    weights = read_csv(out / 'weights.csv')
    assert {'weight_restricted', 'weight_unrestricted'} <= set(weights[0])
    # Count scale: weights sum to the number of focal rows.
    assert sum(float(r['weight_restricted']) for r in weights) == pytest.approx(80.0, rel=1e-6)
    assert min(float(r['weight_restricted']) for r in weights) >= -1e-8
    balance = read_csv(out / 'balance.csv')
    assert {r['cluster'] for r in balance} == {'ALL', 'north', 'south'}


def test_estimate_missing_covariate(toy, capsys):
    d, raw = toy
    raw['basis']['terms'] = ['age', 'femal']
    cfg = write_config(d / 'run.toml', raw)
    assert main(['--config', cfg, 'estimate']) == 2
    err = capsys.readouterr().err
    assert '[basis]' in err and 'femal' in err


def test_unknown_config_key(toy, capsys):
    d, raw = toy
    raw['solve']['lamda'] = 2.0
    cfg = write_config(d / 'run.toml', raw)
    assert main(['--config', cfg, 'estimate']) == 2
    assert 'lamda' in capsys.readouterr().err


def test_sweep_rows_and_svgs(toy):
    d, raw = toy
    raw['output']['emit_svg'] = True
    cfg = write_config(d / 'run.toml', raw)
    assert main(['--config', cfg, 'sweep']) == 0
    rows = read_csv(d / 'out' / 'sweep.csv')
    for mode in ('restricted', 'unrestricted'):
        sel = [r for r in rows if r['bound_mode'] == mode]
        assert [float(r['lambda']) for r in sel] == [0.0, 25.0, 50.0]
        assert all(r['status'] == 'solved' for r in sel)
    svgs = sorted(p for p in os.listdir(d / 'out') if p.endswith('.svg'))
    assert svgs == ['sweep_ess_restricted.svg', 'sweep_ess_unrestricted.svg',
                    'sweep_pbr_restricted.svg', 'sweep_pbr_unrestricted.svg']


def test_sweep_without_overlap_fails(toy, capsys):
    d, raw = toy
    with open(d / 'toy.csv', newline='') as fh:
        rows = list(csv.DictReader(fh))
    focal = [r for r in rows if r['group'] == '1']
    for r in focal[:5]:
        r['hospital'] = 'east'
    with open(d / 'toy.csv', 'w', newline='') as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    cfg = write_config(d / 'run.toml', raw)
    assert main(['--config', cfg, 'sweep']) != 0
    rows = read_csv(d / 'out' / 'sweep.csv')
    assert len(rows) == 6
    assert all(r['status'].startswith('error') for r in rows)


def test_simulate_is_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        out = tmp_path / f'run{k}'
        args = ['--reproducible', '--seed', '7', 'simulate', 'design', '--c', '10',
                '--reps', '2', '--n', '200', '--lambda-grid', '0,15', '--out', str(out)]
        assert main(args) == 0
        outs.append((out / 'study1.csv').read_bytes())
    assert outs[0] == outs[1]


def test_simulate_inference_overlap_levels(tmp_path):
    args = ['simulate', 'inference', '--c', '1,5,10', '--reps', '2', '--n', '200',
            '--lambda-grid', '0,5', '--out', str(tmp_path)]
    assert main(args) == 0
    rows = read_csv(tmp_path / 'study2.csv')
    assert {float(r['c']) for r in rows} == {1.0, 5.0, 10.0}


@pytest.mark.parametrize('args', [['simulate', 'design', '--reps', '0'],
                                  ['simulate', 'nonsense']])
def test_simulate_usage_errors(args, capsys):
    with pytest.raises(SystemExit) as exc:
        main(args)
    assert exc.value.code == 2


def _planted_csv(path, n=400, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, 5))
    y = 3 * X[:, 0] * X[:, 1] + 0.1 * rng.standard_normal(n)
    g = (rng.random(n) < 0.4).astype(int)
    with open(path, 'w', newline='') as fh:
        w = csv.writer(fh)
        w.writerow(['id', 'group', 'y'] + [f'x{k + 1}' for k in range(5)])
        for i in range(n):
            w.writerow([f'r{i:04d}', g[i], repr(float(y[i]))] + [repr(float(v)) for v in X[i]])


def _screen_config(d, k=3, fraction=0.5):
    _planted_csv(d / 'planted.csv')
    return {'data': {'path': 'planted.csv', 'id': 'id', 'group': 'group', 'outcomes': ['y'],
                     'covariates': [f'x{k + 1}' for k in range(5)]},
            'screener': {'fraction': fraction, 'k': k, 'seed': 1},
            'output': {'directory': str(d / 'out')}}


def test_screen_finds_planted_pair(tmp_path, capsys):
    cfg = write_config(tmp_path / 'screen.toml', _screen_config(tmp_path))
    assert main(['--config', cfg, 'screen']) == 0
    rows = read_csv(tmp_path / 'out' / 'interactions.csv')
    assert len(rows) == 3
    assert rows[0]['pair'] == 'x1:x2' and rows[0]['rank'] == '1'
    out = capsys.readouterr().out
    assert '"x1:x2"' in out and 'provenance' in out


def test_screen_k_zero(tmp_path, capsys):
    cfg = write_config(tmp_path / 'screen.toml', _screen_config(tmp_path, k=0))
    assert main(['--config', cfg, 'screen-interactions']) == 0
    assert read_csv(tmp_path / 'out' / 'interactions.csv') == []
    assert 'terms = ["x1", "x2", "x3", "x4", "x5"]' in capsys.readouterr().out


def test_screen_large_fraction_warns(tmp_path, caplog):
    cfg = write_config(tmp_path / 'screen.toml', _screen_config(tmp_path, fraction=0.9))
    with caplog.at_level(logging.WARNING):
        assert main(['--config', cfg, 'screen']) == 0
    assert 'small analysis sample' in caplog.text


def test_leakage_guard(tmp_path, capsys):
    raw = _screen_config(tmp_path)
    cfg = write_config(tmp_path / 'screen.toml', raw)
    assert main(['--config', cfg, 'screen']) == 0
    out = tmp_path / 'out'
    raw['basis'] = {'terms': ['x1', 'x2', 'x1:x2'],
                    'provenance': str(out / 'screen_ids.txt')}
    raw['output'] = {'directory': str(tmp_path / 'est')}
    leaky = write_config(tmp_path / 'leaky.toml', raw)
    assert main(['--config', leaky, 'estimate']) == 2
    assert 'screening row' in capsys.readouterr().err
    raw['data']['analysis_ids'] = str(out / 'analysis_ids.txt')
    clean = write_config(tmp_path / 'clean.toml', raw)
    assert main(['--config', clean, 'estimate']) == 0


def test_estimate_is_byte_identical(toy):
    d, raw = toy
    cfg = write_config(d / 'run.toml', raw)
    blobs = []
    for k in range(2):
        out = d / f'o{k}'
        assert main(['--config', cfg, '--reproducible', 'estimate', '--out', str(out)]) == 0
        blobs.append({n: (out / n).read_bytes() for n in sorted(os.listdir(out))})
    assert blobs[0] == blobs[1]
