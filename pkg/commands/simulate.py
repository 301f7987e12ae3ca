"""`simulate`: Monte-Carlo comparison of the estimators under one scenario."""

import logging
from pathlib import Path
from typing import Literal, Optional

import typer
from pydantic import ValidationError

from commands import EXIT_INPUT_ERROR, report_input_error
from models import RailsError
from utils.csv_exporter import generate_metrics_csv, generate_replications_csv
from utils.report import render
from utils.simulation import DEFAULT_ESTIMATORS, SimulationResult, load_scenario, run_simulation

logger = logging.getLogger(__name__)

SCALES = {"desk": "desk", "full": "full", "paper": "full"}


def run(
    scenario: str,
    replications: int,
    seed: Optional[int],
    scale: Optional[Literal["desk", "full"]],
    out: Path,
    estimators: tuple[str, ...] = DEFAULT_ESTIMATORS,
    n_jobs: int = 1,
) -> tuple[SimulationResult, str]:
    """Run the scenario and write replications.csv, metrics.csv and summary.txt."""
    config = load_scenario(scenario)
    if scale is not None:
        config = config.at_scale(scale)
    result = run_simulation(config, replications, seed, estimators, n_jobs=n_jobs)

    out.mkdir(parents=True, exist_ok=True)
    (out / "replications.csv").write_text(generate_replications_csv(result.records))
    (out / "metrics.csv").write_text(generate_metrics_csv(result.metrics, config.name))
    summary = render(
        "simulation_summary.txt.j2",
        scenario=config.name,
        replications=replications,
        population_size=config.population_size,
        seed=result.seed,
        truth=result.truth,
        metrics=result.metrics,
    )
    (out / "summary.txt").write_text(summary)
    return result, summary


def simulate_command(
    scenario: str = typer.Argument(..., help="S1..S5 or a scenario JSON file"),
    reps: int = typer.Option(1000, "--reps", min=1, help="Replications"),
    seed: Optional[int] = typer.Option(None, "--seed", min=0, help="Overrides the scenario seed"),
    scale: Optional[str] = typer.Option(None, "--scale", help="desk, or full (alias paper) sizes"),
    out: Path = typer.Option(Path("out"), "--out", "-o", help="Output directory"),
    estimator: Optional[list[str]] = typer.Option(
        None, "--estimator", help="Estimator to run (repeatable); default set when omitted"
    ),
    jobs: int = typer.Option(1, "--jobs", min=1, help="Worker processes"),
):
    """Replicate cohort draws from a synthetic population and tabulate estimator metrics."""
    if scale is not None and scale not in SCALES:
        report_input_error(ValueError(f"--scale must be one of {list(SCALES)}, got '{scale}'"))
        raise typer.Exit(code=EXIT_INPUT_ERROR)
    estimators = tuple(estimator or DEFAULT_ESTIMATORS)
    try:
        _, summary = run(scenario, reps, seed, SCALES.get(scale), out, estimators, jobs)
    except (RailsError, ValidationError, OSError) as e:
        report_input_error(e)
        raise typer.Exit(code=EXIT_INPUT_ERROR)
    typer.echo(summary, nl=False)
