"""Command line entry point: ``contactpolicy plan|execute|sweep|replay``.

Outputs go to ``--out`` or, by default, to the directory named by the
``CONTACTPOLICY_OUT`` environment variable (``./runs`` if unset).
Exit status: 0 success, 2 no solution found, 1 error.
"""

from __future__ import annotations

import json
import logging
import os
import sys
from pathlib import Path

import click

from .harness import (EXIT_ERROR, EXIT_OK, cmd_execute, cmd_plan, cmd_sweep, replay,
                      scenario_with)
from .spaces import UsageError

OUT_ENV = "CONTACTPOLICY_OUT"


def default_out_dir() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _scenario_options(f):
    opts = [
        click.option("--scenario", "-s", required=True, help="Scenario file or bundled scenario name."),
        click.option("--particles", type=int, help="Particles per belief."),
        click.option("--method", type=click.Choice(["PC", "WCR", "AC"]), help="Clustering method."),
        click.option("--dwcr", type=float, help="WCR clustering threshold."),
        click.option("--gamma", type=float, help="Actuation uncertainty (linear m/s; angular is a quarter)."),
        click.option("--a-importance", type=int, help="Weight of one execution outcome."),
        click.option("--plan-time", type=float, help="Planning wall-clock budget in seconds."),
        click.option("--iterations", type=int, help="Planning iteration budget (deterministic)."),
        click.option("--budget-steps", type=int, help="Execution budget in controller steps."),
    ]
    for opt in reversed(opts):
        f = opt(f)
    return f


def _load(scenario, **params):
    return scenario_with(scenario, **params)


def _fail(exc: Exception) -> None:
    click.echo(f"error: {exc}", err=True)
    sys.exit(EXIT_ERROR)


@click.group()
@click.option("-v", "--verbose", count=True, help="More logging.")
def main(verbose: int) -> None:
    """Contact-aware belief-space planning and resilient policy execution."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")


@main.command()
@_scenario_options
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Plan trace path.")
def plan(scenario, seed, out, **params):
    """Plan once and write the plan trace."""
    try:
        sc = _load(scenario, **params)
        out = Path(out) if out else default_out_dir() / f"{sc.name}-plan-{seed}.jsonl"
        code, result = cmd_plan(sc, seed, out)
    except UsageError as exc:
        _fail(exc)
    stats = result.solution_set.stats
    click.echo(f"{out}: {stats.get('solutions', 0)} solutions, {stats.get('nodes')} nodes, "
               f"{stats.get('iterations')} iterations, {result.wall_time:.1f} s")
    sys.exit(code)


@main.command()
@_scenario_options
@click.option("--plan", "plan_path", required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--runs", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--block", multiple=True, help="Passage to block during execution ('auto' = initial route's).")
@click.option("--persist", is_flag=True, help="Carry the adapted policy across runs.")
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Execution trace path.")
def execute(scenario, plan_path, runs, seed, block, persist, out, **params):
    """Execute a planned policy several times and report."""
    try:
        sc = _load(scenario, **params)
        out = Path(out) if out else default_out_dir() / f"{sc.name}-exec-{seed}.jsonl"
        report = cmd_execute(plan_path, sc, runs, seed, block=list(block) or None, out_path=out, persist=persist)
    except UsageError as exc:
        _fail(exc)
    click.echo(report.to_csv(), nl=False)
    sys.exit(EXIT_OK)


@main.command()
@_scenario_options
@click.option("--grid", "grid_items", multiple=True, required=True,
              help="NAME=V1,V2,... (repeatable); NAME is a short name or dotted scenario path.")
@click.option("--seeds", required=True, help="Comma-separated master seeds.")
@click.option("--exec-runs", type=int, default=8, show_default=True)
@click.option("--block", multiple=True)
@click.option("--jobs", type=int, default=1, show_default=True)
@click.option("--out", "-o", type=click.Path(dir_okay=False), help="Report trace path.")
def sweep(scenario, grid_items, seeds, exec_runs, block, jobs, out, **params):
    """Plan and execute over a parameter grid; print the table as CSV."""
    try:
        sc = _load(scenario, **params)
        grid = {}
        for item in grid_items:
            if "=" not in item:
                raise UsageError(f"bad grid item {item!r}; expected NAME=V1,V2")
            name, values = item.split("=", 1)
            grid[name] = [json.loads(v) if _is_json(v) else v for v in values.split(",") if v != ""]
        seed_list = [int(s) for s in seeds.split(",") if s.strip()]
        out = Path(out) if out else default_out_dir() / f"{sc.name}-sweep.jsonl"
        report = cmd_sweep(sc, grid, seed_list, n_exec=exec_runs, block=list(block) or None, jobs=jobs,
                           out_path=out)
    except UsageError as exc:
        _fail(exc)
    click.echo(report.to_csv(), nl=False)
    sys.exit(EXIT_OK)


def _is_json(text: str) -> bool:
    try:
        json.loads(text)
    except ValueError:
        return False
    return True


@main.command(name="replay")
@click.argument("trace", type=click.Path(exists=True, dir_okay=False))
def replay_cmd(trace):
    """Re-read a trace, check its round trip and summarise what it holds."""
    try:
        summary = replay(trace)
    except UsageError as exc:
        _fail(exc)
    click.echo(json.dumps(summary, indent=2, sort_keys=True))
    sys.exit(EXIT_OK if summary["byte_stable"] else EXIT_ERROR)


if __name__ == "__main__":  # pragma: no cover
    main()
