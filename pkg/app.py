"""
Command-line entry point of the Epstein-Zin duality toolkit

Commands: check, solve, verify, transforms. Exit codes: 0 success,
1 runtime or flag failure, 2 inapplicable parameters, 64 configuration error.
"""
import functools
import logging
import os
import sys
import time

import click
import pandas as pd

import config
from backend.bsde import solve_constant, solve_pde, verify_y_bounds
from backend.duality import run_stage, verify_duality
from backend.exceptions import AssumptionError, ConfigurationError, EZDualityError
from backend.market import (ModelKind, check_heston, check_kim_omberg, check_regime_duality,
                            derive_coefficients, lyapunov_diagnostic)
from backend.preferences import Regime
from backend.reports import ReportGenerator
from backend.run_config import RunConfig
from backend.transforms import run_conjugacy_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INAPPLICABLE = 2
EXIT_CONFIG = 64


def setup_logging(level=None):
    """Log to the configured file and to stderr"""
    level = (level or config.LOG_LEVEL).upper()
    log_dir = os.path.dirname(config.LOG_FILE)
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s',
                        handlers=[logging.FileHandler(config.LOG_FILE), logging.StreamHandler()],
                        force=True)


def command_errors(fn):
    """Map toolkit exceptions to the exit-code contract"""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            code = fn(*args, **kwargs)
        except ConfigurationError as exc:
            click.echo(f'configuration error: {exc}', err=True)
            code = EXIT_CONFIG
        except AssumptionError as exc:
            click.echo(f'inapplicable: {exc}', err=True)
            code = EXIT_INAPPLICABLE
        except EZDualityError as exc:
            logger.error('%s failed: %s', fn.__name__, exc)
            click.echo(f'error: {exc}', err=True)
            code = EXIT_FAILURE
        click.get_current_context().exit(code)
    return wrapper


def run_options(fn):
    options = [
        click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
                     help='Run file (INI)'),
        click.option('--out', 'out_dir', default=None, type=click.Path(file_okay=False),
                     help='Output directory (overrides output.directory)'),
        click.option('--seed', default=None, type=click.IntRange(min=0), help='Overrides mc.seed'),
        click.option('--threads', default=None, type=click.IntRange(min=1), help='Overrides mc.threads'),
        click.option('--log-level', default=None,
                     type=click.Choice(['DEBUG', 'INFO', 'WARNING', 'ERROR'], case_sensitive=False)),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def load_run(config_path, out_dir, seed, threads, log_level):
    setup_logging(log_level)
    cfg = RunConfig.from_file(config_path).with_overrides(seed=seed, threads=threads, directory=out_dir)
    reports = ReportGenerator(directory=cfg.output['directory'], formats=cfg.output['formats'],
                              timings=cfg.output['timings'])
    reports.stage('config', **cfg.describe())
    logger.info('Loaded %s (%s model, regime %s)', cfg.source, cfg.model.kind.value,
                cfg.preference.regime().value)
    return cfg, reports


def echo_table(rows, columns):
    widths = [max(len(str(c)), *(len(str(r[c])) for r in rows)) for c in columns]
    click.echo('  '.join(str(c).ljust(w) for c, w in zip(columns, widths)))
    for row in rows:
        click.echo('  '.join(str(row[c]).ljust(w) for c, w in zip(columns, widths)))


@click.group()
def cli():
    """Epstein-Zin primal and dual utility toolkit"""


@cli.command()
@run_options
@command_errors
def check(config_path, out_dir, seed, threads, log_level):
    """Run the regime and model assumption checkers"""
    cfg, reports = load_run(config_path, out_dir, seed, threads, log_level)
    p, model = cfg.preference, cfg.model
    regime = check_regime_duality(p)
    click.echo(regime.message)
    rows = [{'check': 'regime', 'condition': regime.label, 'value': regime.applicable}]
    reports.stage('regime', flags=regime.flags, regime=regime.regime, label=regime.label)

    code = EXIT_OK
    if not regime.applicable:
        code = EXIT_INAPPLICABLE
    else:
        report, lyapunov = None, None
        if model.kind is ModelKind.HESTON:
            grid = model.diagnostic_grid(cfg.solver['space_nodes'])
            report = check_heston(model.params, p, grid=grid)
            lyapunov = lyapunov_diagnostic(model, p, cfg.checks['lyapunov_c_under'],
                                           cfg.checks['lyapunov_c_over'], grid=grid)
        elif model.kind is ModelKind.KIM_OMBERG:
            report = check_kim_omberg(model.params, p)
        if report is not None:
            rows.append({'check': report.name, 'condition': 'applicable', 'value': report.applicable})
            rows.extend({'check': report.name, 'condition': k, 'value': v} for k, v in report.conditions.items())
            rows.append({'check': report.name, 'condition': 'accepted', 'value': report.accepted})
            reports.stage('checker', flags=report.flags, name=report.name, reasons=report.reasons)
            for reason in report.reasons:
                click.echo(f'  {reason}')
            if not (report.applicable and report.accepted):
                code = EXIT_INAPPLICABLE
        if lyapunov is not None:
            rows.append({'check': 'lyapunov', 'condition': 'bounded', 'value': lyapunov.bounded})
            reports.stage('lyapunov', flags=lyapunov.flags, **lyapunov.summary())
            if code == EXIT_OK and not lyapunov.bounded:
                code = EXIT_FAILURE

    echo_table(rows, ['check', 'condition', 'value'])
    reports.write_frame('check_conditions', pd.DataFrame(rows), title='Assumption checks')
    reports.write_metadata()
    return code


@cli.command()
@run_options
@command_errors
def solve(config_path, out_dir, seed, threads, log_level):
    """Solve for the value surface Y(t, x) and check its bounds"""
    cfg, reports = load_run(config_path, out_dir, seed, threads, log_level)
    p, model = cfg.preference, cfg.model
    start = time.perf_counter()
    if model.is_constant:
        vs = run_stage('solve', solve_constant, p, model, cfg.horizon, cfg.solver['time_steps'])
    else:
        vs = run_stage('solve', solve_pde, p, model, cfg.horizon, cfg.solver['time_steps'],
                       cfg.solver['space_nodes'], tol=cfg.solver['tol'], max_iter=cfg.solver['max_iter'],
                       override=cfg.override)
    reports.stage('solve', flags={'clamp_inactive': not vs.meta.get('clamp_active', False)},
                  wall_time=time.perf_counter() - start, y0=vs.y0(model.x0), **vs.meta)

    start = time.perf_counter()
    bounds = run_stage('bounds', verify_y_bounds, vs, model, p, cfg.mc['bound_paths'], cfg.mc['steps'],
                       cfg.mc['seed'], cfg.mc['threads'])
    reports.stage('bounds', wall_time=time.perf_counter() - start, **bounds.to_dict())

    reports.write_frame('value_surface', vs.to_frame())
    reports.write_frame('coefficients', derive_coefficients(model, p, vs.x_grid).to_frame())
    reports.write_metadata()

    click.echo(f'Y(0, x0) = {vs.y0(model.x0):.17g}')
    failed = [name for name, ok in bounds.flags.items() if not ok and name != 'bounds_applicable']
    for name, ok in bounds.flags.items():
        click.echo(f'  {name}: {ok}')
    return EXIT_FAILURE if failed else EXIT_OK


@cli.command()
@run_options
@command_errors
def verify(config_path, out_dir, seed, threads, log_level):
    """Full primal/dual pipeline with common random numbers"""
    cfg, reports = load_run(config_path, out_dir, seed, threads, log_level)
    p, model = cfg.preference, cfg.model
    start = time.perf_counter()
    report = verify_duality(model, p, cfg.wealth, cfg.mc['paths'], cfg.mc['steps'], cfg.mc['seed'],
                            cfg.horizon, threads=cfg.mc['threads'], time_steps=cfg.solver['time_steps'],
                            space_nodes=cfg.solver['space_nodes'], perturbation=cfg.checks['perturbation'],
                            lagrange_points=cfg.checks['lagrange_points'], override=cfg.override,
                            batches=cfg.mc['batches'])
    artifacts = report.artifacts
    reports.stage('verify', flags=report.flags, wall_time=time.perf_counter() - start,
                  estimator=artifacts['primal'].estimator)

    reports.write_key_values('duality_report', report.key_values(), title='Duality verification')
    reports.write_frame('value_surface', artifacts['surface'].to_frame())
    reports.write_frame('policy', artifacts['policy'].table())
    reports.write_frame('primal_values', artifacts['primal'].to_frame())
    reports.write_frame('dual_values', artifacts['dual'].to_frame())
    reports.write_frame('lagrange', artifacts['lagrange'])
    reports.write_records('regression', [dict(d, kind=value.kind) for value in (artifacts['primal'], artifacts['dual'])
                                         for d in value.diagnostics])
    if artifacts['bounds'] is not None:
        reports.stage('bounds', **artifacts['bounds'].to_dict())
    if cfg.output['export_paths']:
        reports.write_frame('paths', artifacts['bundle'].export_frame(config.PATH_EXPORT_LIMIT))
    reports.write_metadata()

    click.echo(f'primal {report.primal_estimate:.10g} (se {report.primal_se:.3g})  '
               f'dual {report.dual_estimate:.10g} (se {report.dual_se:.3g})  '
               f'analytic {report.analytic_value:.10g}')
    echo_table([{'flag': k, 'passed': v} for k, v in report.flags.items()], ['flag', 'passed'])
    return EXIT_OK if report.passed() else EXIT_FAILURE


@cli.command()
@run_options
@command_errors
def transforms(config_path, out_dir, seed, threads, log_level):
    """Check the closed-form conjugates against numerical Fenchel-Legendre oracles"""
    cfg, reports = load_run(config_path, out_dir, seed, threads, log_level)
    p = cfg.preference
    if p.regime() not in (Regime.GAMMA_LT1, Regime.BOTH_GT1):
        raise AssumptionError(f'f and F are not conjugate: the assumptions fail iff gamma*psi <= 1 '
                              f'(gamma*psi = {p.gamma * p.psi:.6g}, regime {p.regime().value})')
    start = time.perf_counter()
    report = run_conjugacy_suite(p, samples=cfg.checks['transform_samples'], seed=cfg.mc['seed'])
    reports.stage('transforms', flags=report.flags, wall_time=time.perf_counter() - start,
                  residuals=report.residuals, samples=report.samples)
    reports.write_frame('conjugacy', pd.DataFrame(report.rows()), title='Conjugacy residuals')
    reports.write_metadata()
    echo_table(report.rows(), ['transform', 'max_residual', 'passed'])
    return EXIT_OK if report.passed() else EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(cli())
