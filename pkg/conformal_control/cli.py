"""
Command-line interface for conformal-control.
"""

import click
import sys
import logging
from contextlib import contextmanager
from pathlib import Path

import yaml

from . import __version__
from .config import CONFIG_NAME, Config, ExperimentConfig
from .data import KINDS, SyntheticRecipe, synth as synth_series, write_series
from .diagnostics import run_gradcheck, run_selftest
from .errors import ConfigError, ConformalControlError
from .runner import fewshot as run_fewshot, report as build_report, run as run_experiment
from .search import load_grid, search

logger = logging.getLogger(__name__)


@contextmanager
def handle_errors(action: str):
    """Map library errors to their exit-code category."""
    try:
        yield
    except ConformalControlError as e:
        logger.debug(f"{action} failed", exc_info=True)
        click.echo(f"Error: {e}", err=True)
        sys.exit(e.exit_code)
    except (OSError, KeyboardInterrupt) as e:
        logger.debug(f"{action} failed", exc_info=True)
        click.echo(f"Error: {action} failed: {e}", err=True)
        sys.exit(1)
    except Exception as e:
        logger.debug(f"{action} failed", exc_info=True)
        click.echo(f"Error: {action} failed: {type(e).__name__}: {e}", err=True)
        sys.exit(1)


def parse_overrides(pairs) -> dict:
    """``key=value`` pairs with YAML-typed values."""
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition('=')
        if not sep or not key:
            raise ConfigError(f"Override must look like key=value, got {pair!r}")
        try:
            overrides[key.strip()] = yaml.safe_load(value)
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse value of {key}: {e}") from e
    return overrides


def load_config(config_path, overrides) -> Config:
    return Config(Path(config_path) if config_path else None, parse_overrides(overrides))


@click.group()
@click.version_option(version=__version__)
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose logging')
def main(verbose):
    """Conformal Control - online conformal prediction intervals for time series"""
    log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=log_level,
        format='[conformal-control] %(levelname)s: %(message)s'
    )


@main.command()
@click.option('--force', is_flag=True, help='Overwrite an existing config file')
def init(force):
    """Write a commented default conformal.yml in the current directory."""
    config_path = Path.cwd() / CONFIG_NAME
    if config_path.exists() and not force:
        click.echo(f"OK: Config file already exists: {config_path}")
        return
    with handle_errors('init'):
        Config.create_default_config(config_path)
    click.echo(f"OK: Created config file: {config_path}")
    click.echo("\nNext steps:")
    click.echo("  1. Edit the dataset, methods and alphas sections")
    click.echo("  2. Run: conformal-control run --config conformal.yml")


@main.command()
@click.option('--kind', type=click.Choice(KINDS), default='ar-shift', show_default=True)
@click.option('--T', 'length', type=int, default=2000, show_default=True, help='Series length')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--regions', type=int, default=1, show_default=True)
@click.option('--changepoints', default='', help='Comma-separated changepoints, e.g. 700,1400')
@click.option('--segment', 'segments', multiple=True,
              help='Per-segment "mean,variance,ar" (repeat once per segment)')
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False))
def synth(kind, length, seed, regions, changepoints, segments, out_path):
    """
    Generate a synthetic series CSV with distribution shifts.

    Example: conformal-control synth --kind ar-shift --T 2000 --changepoints 700,1400 --out data.csv
    """
    with handle_errors('synth'):
        try:
            cps = tuple(int(c) for c in changepoints.split(',') if c.strip())
            segs = tuple(tuple(float(v) for v in s.split(',')) for s in segments)
        except ValueError as e:
            raise ConfigError(f"Bad --changepoints/--segment value: {e}") from e
        recipe = SyntheticRecipe(kind=kind, T=length, changepoints=cps, segments=segs,
                                 seed=seed, regions=regions)
        path = write_series(synth_series(recipe), out_path)
    click.echo(f"OK: Wrote {kind} series ({length} steps x {regions} region(s)) to {path}")


@main.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False),
              help=f'Experiment config (default: {CONFIG_NAME} found from the current directory)')
@click.option('--sorted', 'sort', is_flag=True, help='Rearrange each ladder before computing metrics')
@click.option('--set', 'overrides', multiple=True, help='Override a config key, e.g. --set ncc.w=20')
def run(config_path, sort, overrides):
    """
    Run every (method x region x seed) cell and write results and metrics.
    """
    with handle_errors('run'):
        cfg = ExperimentConfig.from_config(load_config(config_path, overrides))
        summary = run_experiment(cfg, sort=sort)
    click.echo(f"OK: {summary.cells} cell(s) finished")
    click.echo(f"  Results: {summary.results_path}")
    click.echo(f"  Metrics: {summary.metrics_path}")
    if not summary.metrics.empty:
        pooled = summary.metrics[summary.metrics['horizon'] == 'pooled']
        table = pooled.groupby('method')[['cs', 'wis', 'crps', 'dcs']].mean()
        click.echo("\n" + table.to_string(float_format=lambda x: f"{x:.4f}"))


@main.command()
@click.option('--in', 'inputs', multiple=True, required=True, type=click.Path(exists=True, dir_okay=False),
              help='Metrics CSV (repeat for several runs)')
@click.option('--out', 'out_path', required=True, type=click.Path(dir_okay=False))
def report(inputs, out_path):
    """Build a wide comparison table (mean and std across seeds)."""
    with handle_errors('report'):
        table = build_report(inputs, out_path)
    click.echo(f"OK: Wrote {len(table)} row(s) x {len(table.columns)} column(s) to {out_path}")


@main.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--set', 'overrides', multiple=True, help='Override a config key')
def fewshot(config_path, overrides):
    """Compare warm-start (pretrained) and cold-start NCC on a target region."""
    with handle_errors('fewshot'):
        cfg = ExperimentConfig.from_config(load_config(config_path, overrides))
        results = run_fewshot(cfg)
    wins = sum(r.warm_cs <= r.cold_cs for r in results)
    for r in results:
        click.echo(f"  seed {r.seed} ({r.target}): warm CS {r.warm_cs:.4f}  cold CS {r.cold_cs:.4f}")
    click.echo(f"OK: warm start at least as calibrated in {wins}/{len(results)} seed(s)")


@main.command()
@click.option('--config', 'config_path', type=click.Path(exists=True, dir_okay=False))
@click.option('--grid', 'grid_path', required=True, type=click.Path(exists=True, dir_okay=False),
              help='YAML mapping of dotted keys to candidate lists')
@click.option('--n-iter', type=int, default=None, help='Sample this many candidates instead of the full grid')
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--out', 'out_path', type=click.Path(dir_okay=False), default=None)
def tune(config_path, grid_path, n_iter, seed, out_path):
    """Rank hyperparameter candidates by CS, then WIS."""
    with handle_errors('tune'):
        config = load_config(config_path, ())
        table = search(config, load_grid(grid_path), n_iter=n_iter, seed=seed)
        if out_path:
            Path(out_path).parent.mkdir(parents=True, exist_ok=True)
            table.to_csv(out_path, index=False)
    click.echo(table[table['rank'] == 1].to_string(index=False))
    if out_path:
        click.echo(f"\nOK: Wrote {len(table)} ranked row(s) to {out_path}")


@main.command()
@click.option('--points', type=int, default=5, show_default=True, help='Random points per check')
@click.option('--seed', type=int, default=0, show_default=True)
def gradcheck(points, seed):
    """Check every loss and network gradient against finite differences."""
    report_ = run_gradcheck(points=points, seed=seed)
    click.echo(report_.format_report())
    if not report_.ok:
        sys.exit(1)


@main.command()
@click.option('--seed', type=int, default=0, show_default=True)
@click.option('--skip-gradients', is_flag=True, help='Only run the property checks')
def selftest(seed, skip_gradients):
    """Run the property and gradient suites."""
    report_ = run_selftest(seed=seed, gradients=not skip_gradients)
    click.echo(report_.format_report())
    if not report_.ok:
        sys.exit(1)


if __name__ == '__main__':
    main()
