"""featgen command-line interface.

Exit codes: 0 success, 2 config error, 3 stage failure.
"""

from __future__ import annotations

import json
import sys

import click

from . import feature_store as fs
from .pipeline import ConfigError, PipelineRun, StageError, load_config, render_report


def _load(config, seed, strict):
    cfg = load_config(config)
    if seed is not None:
        cfg.data.seed = seed
        cfg.unet.seed = seed
        cfg.gan.seed = seed
        cfg.generate.seed = seed
        cfg.classifier.seed = seed
    if strict:
        cfg.strict_determinism = True
    return cfg


def _run(stage_fn):
    try:
        return stage_fn()
    except ConfigError as e:
        click.echo(f"config error: {e}", err=True)
        sys.exit(2)
    except (StageError, FileNotFoundError) as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(3)


config_opt = click.option("--config", required=True, type=click.Path(exists=True))
seed_opt = click.option("--seed", type=int, default=None, help="Override every stage seed.")
strict_opt = click.option("--strict-determinism", is_flag=True, default=False)


def _stage_command(group, name, method):
    @group.command(name=name)
    @config_opt
    @seed_opt
    @strict_opt
    def cmd(config, seed, strict_determinism):
        cfg = _run(lambda: _load(config, seed, strict_determinism))
        run = PipelineRun(cfg)
        ran = _run(getattr(run, method))
        click.echo(f"{name}: {'done' if ran else 'up to date'} ({run.root / method})")
    return cmd


@click.group()
def main():
    """Feature-level GAN augmentation pipeline."""


for _name, _method in [("prepare", "prepare"), ("finetune", "finetune"),
                       ("extract", "extract"), ("gan-train", "gan"),
                       ("generate", "generate"), ("filter", "filter"),
                       ("sweep", "sweep")]:
    _stage_command(main, _name, _method)


@main.command()
@config_opt
@seed_opt
@strict_opt
@click.option("--n-synthetic", type=int, default=0,
              help="Synthetic features to mix into training.")
def classify(config, seed, strict_determinism, n_synthetic):
    """Train and evaluate one classifier mix."""
    cfg = _run(lambda: _load(config, seed, strict_determinism))
    run = PipelineRun(cfg)
    _run(run.filter)
    row = _run(lambda: run.classify(n_synthetic))
    click.echo(json.dumps(row, indent=2, sort_keys=True))


@main.command()
@config_opt
@seed_opt
@strict_opt
def report(config, seed, strict_determinism):
    """Build the RunReport JSON and plots (runs missing stages first)."""
    cfg = _run(lambda: _load(config, seed, strict_determinism))
    rep = _run(PipelineRun(cfg).report)
    click.echo(json.dumps(rep, indent=2, sort_keys=True))


@main.command()
@config_opt
@seed_opt
@strict_opt
def run(config, seed, strict_determinism):
    """Run every stage end to end."""
    cfg = _run(lambda: _load(config, seed, strict_determinism))
    rep = _run(PipelineRun(cfg).report)
    click.echo(json.dumps(rep, indent=2, sort_keys=True))


@main.group()
def store():
    """Feature store utilities."""


@store.command()
@click.argument("path", type=click.Path(exists=True))
def inspect(path):
    """Print header fields and per-class record counts."""
    try:
        info = fs.inspect_store(path)
    except fs.StoreError as e:
        click.echo(f"error: {e}", err=True)
        sys.exit(3)
    click.echo(json.dumps(info, indent=2, sort_keys=True))


if __name__ == "__main__":
    main()
