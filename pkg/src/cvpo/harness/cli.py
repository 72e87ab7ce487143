"""Command line: ``cvpo train | eval | plotdata``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import glob
import json
import sys

import click

from ..envs import make_env
from .config import ConfigError, load_config
from .evaluate import evaluate_policy, load_checkpoint
from .plotdata import SchemaError, emit_plotdata
from .train import NumericalAbort, run_training

EXIT_CONFIG = 2
EXIT_ABORT = 3


@click.group()
def main():
    """Constrained variational policy optimization experiments."""


@main.command()
@click.option("--env", "env_name", type=click.Choice(["grid", "circle"]), default=None)
@click.option("--algo", type=click.Choice(["cvpo", "pd"]), default=None)
@click.option("--config", "config_path", type=click.Path(dir_okay=False), default=None,
              help="key = value file; flags override it")
@click.option("--seed", type=int, default=None)
@click.option("--epochs", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(file_okay=False), required=True)
@click.option("--quiet", is_flag=True)
def train(env_name, algo, config_path, seed, epochs, out_dir, quiet):
    """Train one agent and write metrics.csv under OUT."""
    try:
        cfg = load_config(config_path, {"env": env_name, "algo": algo, "seed": seed, "epochs": epochs})
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    log = None if quiet else click.echo
    try:
        path = run_training(cfg, out_dir, log=log)
    except NumericalAbort as exc:
        click.echo(f"numerical abort: {exc}", err=True)
        sys.exit(EXIT_ABORT)
    click.echo(str(path))


@main.command("eval")
@click.option("--ckpt", required=True, type=click.Path(), help="checkpoint path (with or without suffix)")
@click.option("--episodes", type=int, default=10)
@click.option("--seed", type=int, default=0)
@click.option("--deterministic", is_flag=True)
def eval_cmd(ckpt, episodes, seed, deterministic):
    """Evaluate a saved policy and print a JSON summary."""
    if episodes < 1:
        click.echo("config error: episodes must be >= 1", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        agent, cfg, _ = load_checkpoint(ckpt)
    except (FileNotFoundError, KeyError, TypeError, ValueError) as exc:
        click.echo(f"config error: cannot load checkpoint: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    env = make_env(cfg.env, **cfg.env_kwargs())
    res = evaluate_policy(agent.policy, env, episodes, seed=seed, deterministic=deterministic)
    click.echo(json.dumps(res.to_dict()))


@main.command()
@click.option("--in", "pattern", required=True, help="glob matching metrics.csv files")
@click.option("--out", "out_dir", required=True, type=click.Path(file_okay=False))
def plotdata(pattern, out_dir):
    """Aggregate metrics files into plot-ready CSVs."""
    paths = sorted(glob.glob(pattern, recursive=True))
    if not paths:
        click.echo(f"config error: no files match {pattern!r}", err=True)
        sys.exit(EXIT_CONFIG)
    try:
        files = emit_plotdata(paths, out_dir)
    except SchemaError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    for p in files.values():
        click.echo(str(p))


if __name__ == "__main__":
    main()
