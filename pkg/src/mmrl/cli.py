from __future__ import annotations

import logging
from pathlib import Path

import typer
from rich.console import Console
from rich.logging import RichHandler
from rich.table import Table

from mmrl import config, utils
from mmrl.checkpoint import Checkpoint, load_checkpoint
from mmrl.envs import parse_perturbations
from mmrl.errors import (
    CheckpointError,
    ConfigurationError,
    PerturbationSpecError,
    TrainingDivergence,
)
from mmrl.evaluation import eval_task, evaluate, export_behaviours, random_policy_baseline
from mmrl.trainer import train as run_training
from mmrl.verify import SUITES, run_suites, suite_names

app = typer.Typer(help="Diversity-controlled multi-agent RL: train, evaluate, verify, export")

EXIT_VERIFY_FAILED = 1
EXIT_BAD_INPUT = 2
EXIT_DIVERGED = 3


def _fail(message: str, code: int = EXIT_BAD_INPUT) -> typer.Exit:
    typer.echo(f"error: {message}", err=True)
    return typer.Exit(code=code)


def _open_checkpoint(path: Path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise _fail(str(e))


@app.callback()
def main(
    log_level: str = typer.Option(config.MMRL_LOG_LEVEL, "--log-level", help="Python log level"),
) -> None:
    logging.basicConfig(
        level=log_level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=Console(stderr=True), show_path=False)],
        force=True,
    )


@app.command()
def train(
    config_path: Path = typer.Argument(None, help="YAML run config (defaults apply when omitted)"),
    seed: int = typer.Option(None, help="Override train.seed"),
    steps: int = typer.Option(None, help="Override train.total_steps"),
    out: Path = typer.Option(None, help="Output directory (default: $MMRL_RUNS_DIR/<task>)"),
    single_query: bool = typer.Option(
        False, "--single-query", help="Query the hypernetwork only at episode start"
    ),
) -> None:
    try:
        run = config.load_run_config(config_path)
    except ConfigurationError as e:
        raise _fail(str(e))
    out_dir = out or config.MMRL_RUNS_DIR / run.task.task
    try:
        result = run_training(
            run, out_dir, seed=seed, steps=steps, single_query=True if single_query else None
        )
    except ConfigurationError as e:
        raise _fail(str(e))
    except TrainingDivergence as e:
        raise _fail(f"training diverged: {e}", EXIT_DIVERGED)
    typer.echo(f"Trained {result.env_steps} env steps over {len(result.metrics)} updates")
    typer.echo(f"Checkpoint: {result.checkpoint}")


@app.command("eval")
def eval_checkpoint(
    checkpoint: Path = typer.Option(..., help="Checkpoint written by `mmrl train`"),
    episodes: int = typer.Option(None, help="Episodes (default: eval.episodes)"),
    perturb: str = typer.Option(None, help='e.g. "remove:first_on_plate2" or "target:0.8@50"'),
    nmd_des: float = typer.Option(
        None, "--nmd-des", help="Diversity target (default: eval.nmd_des)"
    ),
    traj_out: Path = typer.Option(None, "--traj-out", help="Write per-step trajectory JSON-lines"),
    agents: int = typer.Option(None, help="Evaluate with a different team size"),
    random: bool = typer.Option(False, "--random", help="Also report the random-policy baseline"),
    seed: int = typer.Option(None, help="First episode seed (default: eval.seed)"),
) -> None:
    ckpt = _open_checkpoint(checkpoint)
    defaults = ckpt.run.eval
    count = episodes if episodes is not None else defaults.episodes
    first_seed = seed if seed is not None else defaults.seed
    try:
        plan = parse_perturbations(perturb if perturb is not None else defaults.perturb)
        summary = evaluate(
            ckpt,
            count=count,
            seed=first_seed,
            nmd_des=nmd_des if nmd_des is not None else defaults.nmd_des,
            plan=plan,
            agents=agents,
            traj_out=traj_out,
        )
    except (ConfigurationError, PerturbationSpecError) as e:
        raise _fail(str(e))
    except TrainingDivergence as e:
        raise _fail(str(e), EXIT_DIVERGED)
    for line in summary.lines():
        typer.echo(line)
    if random:
        baseline = random_policy_baseline(eval_task(ckpt, agents), count, first_seed)
        typer.echo(f"random-policy reward: {baseline:.3f}")
    if traj_out is not None:
        typer.echo(f"Trajectories: {traj_out}")


@app.command()
def verify(
    suite: str = typer.Option("all", help="all | " + " | ".join(SUITES)),
    seed: int = typer.Option(0, help="Seed for the randomized suites"),
) -> None:
    try:
        names = suite_names(suite)
    except KeyError:
        raise _fail(f"unknown suite '{suite}'")
    results = run_suites(names, seed=seed)

    table = Table(title=f"mmrl verify (seed {seed})")
    table.add_column("suite")
    table.add_column("check")
    table.add_column("result")
    table.add_column("measured")
    for r in results:
        status = "audit" if not r.asserted else ("[green]pass[/]" if r.passed else "[red]FAIL[/]")
        table.add_row(r.suite, r.name, status, r.detail)
    Console().print(table)

    failed = [r for r in results if r.asserted and not r.passed]
    typer.echo(f"{len(names)} suites, {len(results)} checks, {len(failed)} failed")
    if failed:
        raise typer.Exit(code=EXIT_VERIFY_FAILED)


@app.command()
def export(
    checkpoint: Path = typer.Option(..., help="Checkpoint written by `mmrl train`"),
    env: str = typer.Option(None, help="Task name; must match the checkpoint"),
    episodes: int = typer.Option(128, help="Episodes to roll out"),
    out: Path = typer.Option(Path("behaviours.jsonl"), help="JSON-lines output"),
    seed: int = typer.Option(0, help="First episode seed"),
    nmd_des: float = typer.Option(
        None, "--nmd-des", help="Diversity target (default: eval.nmd_des)"
    ),
    agents: int = typer.Option(None, help="Export with a different team size"),
) -> None:
    ckpt = _open_checkpoint(checkpoint)
    if env is not None and env != ckpt.run.task.task:
        raise _fail(f"checkpoint was trained on '{ckpt.run.task.task}', not '{env}'")
    records = export_behaviours(
        ckpt,
        count=episodes,
        seed=seed,
        nmd_des=nmd_des if nmd_des is not None else ckpt.run.eval.nmd_des,
        agents=agents,
    )
    utils.ensure_dir(out.parent)
    out.unlink(missing_ok=True)
    try:
        written = utils.append_jsonl(out, records)
    except ConfigurationError as e:
        raise _fail(str(e))
    except TrainingDivergence as e:
        raise _fail(str(e), EXIT_DIVERGED)
    typer.echo(f"Exported {written} behaviour records to {out}")


@app.command("config-keys")
def config_keys() -> None:
    """List every run config key with its default."""
    table = Table(title="run config keys")
    table.add_column("key")
    table.add_column("default")
    table.add_column("meaning")
    for key, default, doc in config.describe_keys():
        table.add_row(key, repr(default), doc)
    Console().print(table)


if __name__ == "__main__":
    app()
