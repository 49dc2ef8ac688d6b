"""Command-line entry point"""
import asyncio
import functools
import logging
import sys
from typing import List, Optional

import click

from app.config import expand_grid, load_grid_config, load_run_config
from app.dataset import synthesize_corpus
from app.engine import EXIT_OK, Stage, results_table
from app.engine.core import PipelineEngine, exit_code_for
from app.engine.grid import run_grid
from app.engine.report import markdown_table, report
from app.errors import SSLPipelineError
from app.utils import settings, setup_logging

logger = logging.getLogger(__name__)


def run_options(func):
    """Config file plus CLI overrides; CLI wins over the file"""
    @click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                  help="Run config YAML (defaults apply when omitted)")
    @click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                  help="Override a config key, e.g. --set split.base=40")
    @click.option("--seed", type=int, default=None)
    @click.option("--output-dir", default=None, help="Run directory (relative paths go under ARTIFACT_ROOT)")
    @click.option("--method", type=click.Choice(["simclr", "simsiam", "simsiam+c+d", "simsiam+d"]), default=None)
    @click.option("--no-expert", is_flag=True, default=False, help="simsiam+d: distill from the base teacher only")
    @click.option("--device", default=None, help=f"Torch device (default {settings.DEVICE})")
    @functools.wraps(func)
    def wrapper(config_path, overrides, seed, output_dir, method, no_expert, device, **kwargs):
        extra: List[str] = list(overrides)
        if seed is not None:
            extra.append(f"seed={seed}")
        if output_dir is not None:
            extra.append(f"output_dir={output_dir}")
        if method is not None:
            extra.append(f"method={method}")
        if no_expert:
            extra.append("distill.use_experts=false")
        return func(config_path=config_path, overrides=extra, device=device, **kwargs)
    return wrapper


def _exit_on_error(func):
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            return func(*args, **kwargs)
        except SSLPipelineError as e:
            logger.error(f"❌ {e}")
            sys.exit(exit_code_for(e))
    return wrapper


def _run_stage(config_path: Optional[str], overrides: List[str], device: Optional[str], stop_after: Optional[Stage]):
    cfg = load_run_config(config_path, overrides)
    rows = PipelineEngine(cfg, device=device).run(stop_after)
    for row in rows:
        click.echo(f"{row.subset}\tN={row.n}\t{row.method}\tseed={row.seed}\t{row.accuracy:.2f}%")
    sys.exit(EXIT_OK)


@click.group()
@click.option("--log-level", default=None, help=f"Logging level (default {settings.LOG_LEVEL})")
def cli(log_level):
    """Class-imbalanced self-supervised learning pipeline"""
    setup_logging(log_level or settings.LOG_LEVEL)


@cli.group()
def dataset():
    """Corpus and training-subset commands"""


@dataset.command("synth")
@click.argument("root", type=click.Path(file_okay=False))
@click.option("--num-classes", type=int, default=10)
@click.option("--train-per-class", type=int, default=200)
@click.option("--test-per-class", type=int, default=50)
@click.option("--image-size", type=int, default=32)
@click.option("--signal", type=float, default=1.0, help="0 gives label-independent noise")
@click.option("--seed", type=int, default=0)
@_exit_on_error
def dataset_synth(root, num_classes, train_per_class, test_per_class, image_size, signal, seed):
    """Write a synthetic corpus in the binary batch layout"""
    files = synthesize_corpus(
        root, num_classes=num_classes, train_per_class=train_per_class,
        test_per_class=test_per_class, image_size=image_size, signal=signal, seed=seed,
    )
    click.echo(f"wrote {len(files.train) + len(files.test)} files to {files.root}")


@dataset.command("build")
@run_options
@_exit_on_error
def dataset_build(config_path, overrides, device):
    """Materialize the configured training subset and its class distribution"""
    _run_stage(config_path, overrides, device, Stage.DATASET)


@cli.command()
@run_options
@_exit_on_error
def pretrain(config_path, overrides, device):
    """Pre-train the base model"""
    _run_stage(config_path, overrides, device, Stage.PRETRAIN)


@cli.command()
@run_options
@_exit_on_error
def cluster(config_path, overrides, device):
    """Cluster base-model features (pre-trains first if needed)"""
    _run_stage(config_path, overrides, device, Stage.CLUSTER)


@cli.command()
@run_options
@_exit_on_error
def experts(config_path, overrides, device):
    """Train one expert per cluster"""
    _run_stage(config_path, overrides, device, Stage.EXPERTS)


@cli.command()
@run_options
@_exit_on_error
def distill(config_path, overrides, device):
    """Distill the student from the base and expert teachers"""
    _run_stage(config_path, overrides, device, Stage.DISTILL)


@cli.command()
@run_options
@_exit_on_error
def lineval(config_path, overrides, device):
    """Linear evaluation of the final model"""
    _run_stage(config_path, overrides, device, Stage.LINEVAL)


@cli.command()
@run_options
@_exit_on_error
def run(config_path, overrides, device):
    """Run the whole pipeline for one config"""
    _run_stage(config_path, overrides, device, None)


@cli.command()
@click.argument("grid_path", type=click.Path(exists=True, dir_okay=False))
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override a key in every run")
@click.option("--max-parallel", type=int, default=None)
@click.option("--device", default=None)
@_exit_on_error
def grid(grid_path, overrides, max_parallel, device):
    """Run every (subset, method, seed) of a grid file"""
    grid_cfg = load_grid_config(grid_path)
    configs = expand_grid(grid_cfg, overrides)
    result = asyncio.run(run_grid(
        configs,
        max_parallel=max_parallel or grid_cfg.max_parallel,
        device=device,
        output_dir=grid_cfg.output_dir,
    ))
    if result.rows:
        click.echo(markdown_table(results_table(result.rows)))
    for name, error in result.failures.items():
        click.echo(f"FAILED {name}: {error}", err=True)
    sys.exit(EXIT_OK if not result.failures else 1)


@cli.command("report")
@click.argument("run_dir", type=click.Path(file_okay=False))
@_exit_on_error
def report_command(run_dir):
    """Render report.md and plot-data CSVs for a run or grid directory"""
    try:
        path = report(run_dir)
    except SSLPipelineError as e:
        logger.error(f"❌ {e}")
        sys.exit(Stage.REPORT.exit_code)
    click.echo(path.read_text())


if __name__ == "__main__":
    cli()
