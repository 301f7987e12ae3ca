"""`estimate`: weighted prevalence from a weights file and a cohort file."""

import logging
from pathlib import Path
from typing import Optional

import numpy as np
import typer
from pydantic import BaseModel, Field, ValidationError

from commands import EXIT_INPUT_ERROR, report_input_error
from models import RailsError, SchemaError, TermSet
from utils.csv_parser import (
    ID_COLUMN,
    covariate_columns,
    parse_binary,
    parse_cohort,
    parse_weights,
    read_table,
)
from utils.design import build_design_matrix
from utils.estimation import PrevalenceEstimate, double_weighting, estimate_prevalence
from utils.report import render
from utils.storage import write_json

logger = logging.getLogger(__name__)

MISMATCHES_SHOWN = 5


class EstimateConfig(BaseModel):
    weights_path: Path
    cohort_path: Path
    outcome_column: str = "_outcome"
    complete_column: Optional[str] = None
    missing_variables: Optional[list[str]] = None
    population_size: Optional[float] = Field(None, gt=0)
    level: float = Field(0.95, gt=0, lt=1)
    out: Optional[Path] = None


def _aligned_weights(weight_ids: list[str], final_weight: np.ndarray, cohort_ids: list[str]):
    """Final weights in cohort row order; every cohort row needs exactly one weight."""
    by_id = dict(zip(weight_ids, final_weight))
    missing = [i for i in cohort_ids if i not in by_id]
    extra = [i for i in weight_ids if i not in set(cohort_ids)]
    if missing or extra or len(by_id) != len(weight_ids):
        raise SchemaError(
            "Weights and cohort ids do not match: "
            f"cohort ids without weight {missing[:MISMATCHES_SHOWN]}, "
            f"weight ids not in cohort {extra[:MISMATCHES_SHOWN]}"
        )
    return np.array([by_id[i] for i in cohort_ids])


def run(config: EstimateConfig) -> tuple[PrevalenceEstimate, dict]:
    """Estimate the prevalence, double-weighting first when a completeness column is given."""
    weights_file = parse_weights(config.weights_path.read_text())
    content = config.cohort_path.read_text()
    table = read_table(content)
    if ID_COLUMN in table.header:
        cohort_ids = table.column(ID_COLUMN)
    else:
        cohort_ids = [str(i) for i in range(len(table.rows))]
    if config.outcome_column not in table.header:
        raise SchemaError(f"Cohort file has no outcome column '{config.outcome_column}'")

    if config.complete_column is None:
        weights = _aligned_weights(weights_file.ids, weights_file.final_weight, cohort_ids)
        y = np.array([
            parse_binary(row[config.outcome_column], config.outcome_column, line)
            for line, row in table.rows
        ])
        estimate = estimate_prevalence(weights, y, config.level)
        return estimate, {}

    column = config.complete_column
    if column not in table.header:
        raise SchemaError(f"Cohort file has no column '{column}'")
    complete = np.array(
        [parse_binary(row[column], column, line) == 1.0 for line, row in table.rows]
    )
    weights = _aligned_weights(weights_file.ids, weights_file.final_weight, cohort_ids)

    variables = config.missing_variables
    if variables is None:
        variables = [
            name for name in covariate_columns(table)
            if name not in (config.outcome_column, column)
        ]
    cohort = parse_cohort(content, variables=variables, outcome_column=None)
    X = build_design_matrix(cohort, TermSet.parse(variables))
    population_size = config.population_size or float(weights.sum())
    adjusted = double_weighting(weights, complete, X, population_size)

    y = np.array([
        parse_binary(row[config.outcome_column], config.outcome_column, line)
        for (line, row), is_complete in zip(table.rows, complete)
        if is_complete
    ])
    estimate = estimate_prevalence(adjusted.weights[complete], y, config.level)
    adjustment = {
        "rows": len(complete),
        "complete": int(complete.sum()),
        "floored": adjusted.floored,
        "coefficients": adjusted.coefficients,
    }
    return estimate, adjustment


def estimate_command(
    weights: Path = typer.Option(..., "--weights", "-w", exists=True, dir_okay=False),
    cohort: Path = typer.Option(..., "--cohort", exists=True, dir_okay=False),
    outcome: str = typer.Option("_outcome", "--outcome", help="Binary outcome column"),
    complete: Optional[str] = typer.Option(
        None, "--complete", help="Completeness column; enables double weighting"
    ),
    missing_vars: Optional[list[str]] = typer.Option(
        None, "--missing-var", help="Covariate of the completeness model (repeatable)"
    ),
    population_size: Optional[float] = typer.Option(
        None, "--population-size", help="Total the adjusted weights are scaled to"
    ),
    level: float = typer.Option(0.95, "--level", help="Confidence level"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Write estimate.json here"),
):
    """Print the weighted prevalence with its linearized standard error and interval."""
    try:
        config = EstimateConfig(
            weights_path=weights,
            cohort_path=cohort,
            outcome_column=outcome,
            complete_column=complete,
            missing_variables=missing_vars or None,
            population_size=population_size,
            level=level,
            out=out,
        )
        estimate, adjustment = run(config)
    except (RailsError, ValidationError, OSError) as e:
        report_input_error(e)
        raise typer.Exit(code=EXIT_INPUT_ERROR)

    if config.out is not None:
        write_json(
            config.out / "estimate.json",
            {"estimate": estimate.model_dump(), "double_weighting": adjustment or None},
        )
    typer.echo(
        render(
            "estimate_summary.txt.j2",
            outcome=config.outcome_column,
            estimate=estimate,
            adjustment=adjustment,
        ),
        nl=False,
    )
