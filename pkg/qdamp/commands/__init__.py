import logging

import click
from flask import Blueprint

from qdamp.errors import ConfigError, LabError
from qdamp.commands.runner import execute, failure_report
from qdamp.utils.parsers import read_config_tree, validate_run_config

logger = logging.getLogger(__name__)

bp = Blueprint('commands', __name__, cli_group=None)


def run_options(fn):
    """--config, --out, --seed and --threads, shared by every run command."""
    fn = click.option('--threads', type=int, default=None, help='Worker threads for independent scan points.')(fn)
    fn = click.option('--seed', type=int, default=None, help='Override the config seed.')(fn)
    fn = click.option('--out', 'out', type=click.Path(file_okay=False), default=None,
                      help='Output directory for report.json and series.csv.')(fn)
    fn = click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False),
                      help='Run configuration (JSON).')(fn)
    return fn


def _run(command, config_path, out, seed, threads, force=False):
    try:
        code, report = execute(config_path, command, out, seed, threads, force=force)
    except LabError as e:
        click.echo(f'error: {e.message}', err=True)
        for line in e.errors:
            click.echo(f'  {line}', err=True)
        failure_report(e, command, config_path, out, seed)
        raise SystemExit(e.exit_code)

    for name, ok in sorted(report['verdicts'].items()):
        click.echo(f'{name}: {"pass" if ok else "FAIL"}')
    raise SystemExit(code)


# ==================== RUN COMMANDS ====================

@bp.cli.command('solve')
@run_options
@click.option('--force', is_flag=True, default=False, help='Run even when the growth assumptions fail.')
def solve(config_path, out, seed, threads, force):
    """Propagate the damped equation and check the norm bounds."""
    _run('solve', config_path, out, seed, threads, force)


@bp.cli.command('sensitivity')
@run_options
def sensitivity(config_path, out, seed, threads):
    """Difference quotients against the sensitivity equation."""
    _run('sensitivity', config_path, out, seed, threads)


@bp.cli.command('parametrix-scan')
@run_options
def parametrix_scan(config_path, out, seed, threads):
    """Parametrix remainder decay in mu."""
    _run('parametrix-scan', config_path, out, seed, threads)


@bp.cli.command('commutator-scan')
@run_options
def commutator_scan(config_path, out, seed, threads):
    """Uniform bounds of the cutoff commutators in epsilon."""
    _run('commutator-scan', config_path, out, seed, threads)


@bp.cli.command('assumptions')
@run_options
def assumptions(config_path, out, seed, threads):
    """Sample the growth-class inequalities of the potentials."""
    _run('assumptions', config_path, out, seed, threads)


@bp.cli.command('manybody')
@run_options
def manybody(config_path, out, seed, threads):
    """Several particles: dynamics, interaction growth and parametrix."""
    _run('manybody', config_path, out, seed, threads)


@bp.cli.command('quantize-check')
@run_options
def quantize_check(config_path, out, seed, threads):
    """Fast quantization path against the dense kernel."""
    _run('quantize-check', config_path, out, seed, threads)


# ==================== VALIDATION ====================

@bp.cli.command('validate')
@click.option('--config', 'config_path', required=True, type=click.Path(dir_okay=False))
def validate(config_path):
    """Check a configuration without running it."""
    try:
        diagnostics = validate_run_config(read_config_tree(config_path))
    except ConfigError as e:
        diagnostics = e.errors or [e.message]
    if not diagnostics:
        click.echo('ok')
        return
    for line in diagnostics:
        click.echo(line)
    raise SystemExit(1)
