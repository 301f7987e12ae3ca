"""`fit`: RAILS weights for a non-probability cohort from files."""

import dataclasses
import logging
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import typer
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from commands import EXIT_INPUT_ERROR, EXIT_NOT_CONVERGED, report_input_error
from models import (
    Cohort,
    MarginTargets,
    NpsOptions,
    RailsError,
    RakingOptions,
    Schema,
    SchemaError,
    SelectionOptions,
    TermSet,
    make_schema,
    schema_diff,
)
from utils.csv_exporter import generate_weights_csv
from utils.csv_parser import parse_binary, parse_cohort, parse_margins, read_table
from utils.design import build_design_matrix, expand_terms
from utils.raking import check_constraints
from utils.report import fit_report, render
from utils.selection import RailsResult, rails_fit, recalibrate
from utils.storage import read_json, write_json

logger = logging.getLogger(__name__)


class RunConfig(BaseModel):
    """Inputs and options of one weighting run. Relative paths resolve against the config file."""
    model_config = ConfigDict(populate_by_name=True)

    np_cohort_path: Path
    p_cohort_path: Path
    margins_path: Path
    declared_schema: Optional[dict[str, list[str]]] = Field(None, alias="schema")
    main_terms: list[str] = Field(min_length=1)
    candidate_pool: list[str] = Field(default_factory=list)
    max_order: int = Field(1, ge=1)
    complete_column: Optional[str] = None
    nps: NpsOptions = Field(default_factory=NpsOptions)
    raking: RakingOptions = Field(default_factory=RakingOptions)
    selection: SelectionOptions = Field(default_factory=SelectionOptions)
    out: Path = Path("out")
    seed: int = Field(0, ge=0)

    def resolve(self, base: Path) -> "RunConfig":
        return self.model_copy(
            update={
                name: base / getattr(self, name)
                for name in ("np_cohort_path", "p_cohort_path", "margins_path")
                if not getattr(self, name).is_absolute()
            }
        )

    def terms(self) -> tuple[TermSet, TermSet]:
        """Main terms and the candidate pool, generating the pool from max_order if empty."""
        mains = TermSet.parse(self.main_terms)
        pool = TermSet.parse(self.candidate_pool)
        if not len(pool) and self.max_order > 1:
            generated = expand_terms(mains.variables(), self.max_order)
            pool = TermSet(t for t in generated if t.order > 1)
        return mains, pool.difference(mains)


def load_config(
    path: Path,
    out: Optional[Path] = None,
    alpha: Optional[float] = None,
    tolerance: Optional[float] = None,
    max_order: Optional[int] = None,
    seed: Optional[int] = None,
    jobs: Optional[int] = None,
) -> RunConfig:
    """Read a run configuration and apply command-line overrides, revalidating the result."""
    config = RunConfig.model_validate(read_json(path)).resolve(path.resolve().parent)
    data = config.model_dump()
    for name, value in (("out", out), ("max_order", max_order), ("seed", seed)):
        if value is not None:
            data[name] = value
    if alpha is not None:
        data["selection"]["alpha"] = alpha
    if jobs is not None:
        data["selection"]["n_jobs"] = jobs
    if tolerance is not None:
        data["raking"]["constraint_tolerance"] = tolerance
    return RunConfig.model_validate(data)


def load_cohorts(config: RunConfig, variables) -> tuple[Cohort, Cohort]:
    """Parse both cohorts on one schema, declared or inferred from the union of their levels."""
    np_content = config.np_cohort_path.read_text()
    p_content = config.p_cohort_path.read_text()
    if config.declared_schema is not None:
        schema = make_schema(config.declared_schema)
        np_cohort = parse_cohort(np_content, schema, outcome_column=None)
        p_cohort = parse_cohort(p_content, schema, require_weight=True, outcome_column=None)
        return np_cohort, p_cohort

    np_cohort = parse_cohort(np_content, variables=variables, outcome_column=None)
    p_cohort = parse_cohort(
        p_content, variables=variables, require_weight=True, outcome_column=None
    )
    diff = schema_diff(np_cohort.schema, p_cohort.schema)
    if diff:
        logger.info("Levels seen in one cohort only are added to both: %s", sorted(diff))
        schema = union_schema(np_cohort.schema, p_cohort.schema)
        np_cohort, p_cohort = recode(np_cohort, schema), recode(p_cohort, schema)
    return np_cohort, p_cohort


def union_schema(first: Schema, second: Schema) -> Schema:
    """Sorted union of the observed levels of each variable."""
    other = dict(second)
    return make_schema({name: sorted(set(levels) | set(other[name])) for name, levels in first})


def recode(cohort: Cohort, schema: Schema) -> Cohort:
    """The same rows with level codes taken from a wider schema."""
    codes = np.empty_like(cohort.codes)
    for j, ((_, levels), (_, wider)) in enumerate(zip(cohort.schema, schema)):
        mapping = np.array([wider.index(level) for level in levels])
        codes[:, j] = mapping[cohort.codes[:, j]]
    return dataclasses.replace(cohort, schema=schema, codes=codes)


def fitted_margins(targets: MarginTargets, variables: Sequence[str]) -> MarginTargets:
    """Drop margins of terms that use a variable outside the fitted terms."""
    outside = [t for t in targets.terms() if not set(t.variables) <= set(variables)]
    if not outside:
        return targets
    logger.warning(
        "Margins for %s use variables outside the fitted terms and are ignored",
        [t.label for t in outside],
    )
    return targets.restrict(t for t in targets.terms() if t not in outside)


def completeness(config: RunConfig) -> np.ndarray:
    """Per-row completeness flags of the non-probability cohort."""
    column = config.complete_column
    table = read_table(config.np_cohort_path.read_text())
    if column not in table.header:
        raise SchemaError(f"Cohort file has no column '{column}'")
    return np.array([parse_binary(row[column], column, line) == 1.0 for line, row in table.rows])


def run(config: RunConfig) -> tuple[RailsResult, Cohort, dict]:
    """Load inputs, fit the weights and write weights.csv, report.json and summary.txt."""
    mains, pool = config.terms()
    variables = mains.union(pool).variables()
    np_cohort, p_cohort = load_cohorts(config, variables)
    targets = fitted_margins(parse_margins(config.margins_path.read_text()), variables)
    targets.validate_schema(np_cohort.schema)

    options = (config.nps, config.raking, config.selection)
    if config.complete_column is not None:
        complete = completeness(config)
        result = recalibrate(np_cohort, complete, p_cohort, targets, mains, pool, *options)
        np_cohort = np_cohort.subset(complete)
    else:
        result = rails_fit(np_cohort, p_cohort, targets, mains, pool, *options)
    logger.info("Fit finished: converged=%s", result.converged)

    X = build_design_matrix(np_cohort, result.raking_terms, drop_aliased=False)
    constraints = check_constraints(
        result.weights, X, targets, absolute_floor=config.raking.absolute_floor
    )
    report = fit_report(
        result,
        options=config.model_dump(mode="json", by_alias=True),
        schema={name: list(levels) for name, levels in np_cohort.schema},
        main_terms=mains,
        candidate_pool=pool,
        constraints=constraints,
    )

    config.out.mkdir(parents=True, exist_ok=True)
    (config.out / "weights.csv").write_text(
        generate_weights_csv(np_cohort.ids, result.base_weights, result.weights)
    )
    write_json(config.out / "report.json", report)
    summary = render("fit_summary.txt.j2", report=report, n_rows=np_cohort.n_rows)
    (config.out / "summary.txt").write_text(summary)
    return result, np_cohort, {"report": report, "summary": summary}


def fit_command(
    config: Path = typer.Option(
        ..., "--config", "-c", exists=True, dir_okay=False, help="Run configuration (JSON)"
    ),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Output directory"),
    alpha: Optional[float] = typer.Option(None, "--alpha", help="Selection significance level"),
    tolerance: Optional[float] = typer.Option(
        None, "--tolerance", help="Raking relative tolerance"
    ),
    max_order: Optional[int] = typer.Option(
        None, "--max-order", help="Generate interactions up to this order"
    ),
    seed: Optional[int] = typer.Option(None, "--seed", help="Recorded in the report"),
    jobs: Optional[int] = typer.Option(None, "--jobs", help="Parallel candidate fits"),
):
    """Select calibration terms, fit base weights and rake them to the margins."""
    try:
        run_config = load_config(config, out, alpha, tolerance, max_order, seed, jobs)
        result, _, outputs = run(run_config)
    except (RailsError, ValidationError, OSError) as e:
        report_input_error(e)
        raise typer.Exit(code=EXIT_INPUT_ERROR)

    typer.echo(outputs["summary"], nl=False)
    if not result.converged:
        raise typer.Exit(code=EXIT_NOT_CONVERGED)
