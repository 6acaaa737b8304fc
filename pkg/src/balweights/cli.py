"""Command-line entry point: ``balweights {estimate,sweep,simulate,screen}``.

Exit codes: 0 success, 1 runtime or solver failure, 2 configuration or
validation failure (including usage errors).
"""

import argparse
import logging
import os
import sys

from balweights.config import load_config
from balweights.errors import ConfigError
from balweights.pipeline import (StageError, run_estimate, run_screen, run_simulation,
                                 run_sweep)

logger = logging.getLogger('balweights')


def _float_list(text):
    try:
        values = [float(v) for v in text.split(',') if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f'expected comma-separated numbers, got {text!r}')
    if not values:
        raise argparse.ArgumentTypeError('empty list')
    return values


def _global_flags(default):
    # Subcommand copies use SUPPRESS so they do not overwrite flags given
    # before the subcommand name.
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument('--config', default=default, help='TOML run configuration')
    p.add_argument('--seed', type=int, default=default, help='override the random seed')
    p.add_argument('--threads', type=int, default=default,
                   help='worker processes for simulations and forest training')
    p.add_argument('--reproducible', action='store_true', default=default,
                   help='omit generated-timestamp lines so reruns are byte-identical')
    p.add_argument('-v', '--verbose', action='store_true', default=default)
    return p


def build_parser():
    glob = _global_flags(argparse.SUPPRESS)
    parser = argparse.ArgumentParser(
        prog='balweights', parents=[_global_flags(None)],
        description='Approximate balancing weights for disparity estimation.')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('estimate', parents=[glob],
                       help='solve for weights and write estimates and diagnostics')
    p.add_argument('--out', help='output directory (default: [output] directory)')

    p = sub.add_parser('sweep', parents=[glob], help='balance diagnostics along a lambda grid')
    p.add_argument('--lambda-grid', type=_float_list)
    p.add_argument('--out')

    p = sub.add_parser('simulate', parents=[glob], help='run a simulation study')
    p.add_argument('study', choices=('design', 'inference'))
    p.add_argument('--reps', type=int, default=None)
    p.add_argument('--c', '--c-grid', dest='c_grid', type=_float_list, default=None,
                   help='overlap level(s), comma separated')
    p.add_argument('--lambda-grid', type=_float_list)
    p.add_argument('--n', type=int, default=None, help='sample size per replication')
    p.add_argument('--out', default=None)
    p.add_argument('--svg', action='store_true')

    p = sub.add_parser('screen', aliases=['screen-interactions'], parents=[glob],
                       help='rank pairwise interactions on a held-out screen sample')
    p.add_argument('--out')
    return parser


def _require_config(args, parser):
    if not args.config:
        parser.error(f'{args.command} needs --config')
    return load_config(args.config)


def _simulate(args, parser):
    from balweights.simulation.dgp import DgpConfig
    from balweights.simulation.studies import DESIGN_GRID, INFERENCE_GRID, StudyConfig
    if args.reps is not None and args.reps < 1:
        parser.error('--reps must be at least 1')
    if args.n is not None and args.n < 2:
        parser.error('--n must be at least 2')
    cfg = load_config(args.config) if args.config else None
    dgp = DgpConfig(n=args.n or 1000, c=(args.c_grid or [10.0])[0],
                    seed=args.seed if args.seed is not None else 0)
    grid = args.lambda_grid or (DESIGN_GRID if args.study == 'design' else INFERENCE_GRID)
    kw = {}
    if cfg is not None:
        kw['solver'] = cfg.solve.solver
    study = StudyConfig(dgp=dgp, replications=args.reps or 200, lambda_grid=tuple(grid),
                        c_grid=tuple(args.c_grid) if args.c_grid else None,
                        workers=args.threads or 1, **kw)
    out = args.out or (cfg.output.directory if cfg else 'output')
    emit = args.svg or bool(cfg and cfg.output.emit_svg)
    paths = run_simulation(args.study, study, out, reproducible=bool(args.reproducible),
                           emit_svg=emit)
    for p in paths.values():
        print(p)
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='%(levelname)s %(name)s: %(message)s')
    reproducible = bool(args.reproducible)
    try:
        if args.command == 'simulate':
            return _simulate(args, parser)
        cfg = _require_config(args, parser)
        if args.command == 'estimate':
            paths = run_estimate(cfg, reproducible=reproducible, out_dir=args.out)
            for p in paths.values():
                print(p)
            return 0
        if args.command == 'sweep':
            paths, all_failed = run_sweep(cfg, args.lambda_grid, reproducible=reproducible,
                                          out_dir=args.out)
            for p in paths.values():
                print(p)
            if all_failed:
                print('error: [sweep] every grid point failed; see sweep.csv statuses',
                      file=sys.stderr)
                return 1
            return 0
        if args.command in ('screen', 'screen-interactions'):
            res = run_screen(cfg, seed=args.seed, reproducible=reproducible,
                             out_dir=args.out, n_jobs=args.threads or 1)
            sys.stdout.write(res.basis_snippet)
            print(f'# wrote {os.path.abspath(res.paths["interactions"])}')
            return 0
    except StageError as exc:
        print(f'error: {exc}', file=sys.stderr)
        return exc.exit_code
    except ConfigError as exc:
        print(f'error: [config] {exc}', file=sys.stderr)
        return 2
    parser.error(f'unknown command {args.command!r}')


if __name__ == '__main__':
    sys.exit(main())
