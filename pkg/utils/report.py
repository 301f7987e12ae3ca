"""Machine-readable fit reports and the human-readable summaries rendered from templates."""

from pathlib import Path
from typing import Any, Optional

from jinja2 import Environment, FileSystemLoader, StrictUndefined

from models import TermSet
from utils.raking import ConstraintReport
from utils.selection import RailsResult, RakingAttempt

TEMPLATE_DIR = Path(__file__).resolve().parent.parent / "templates"


def significant(value: Optional[float], digits: int = 4) -> str:
    """Format a number to a fixed count of significant digits for display."""
    if value is None:
        return "-"
    return f"{value:.{digits}g}"


def _environment() -> Environment:
    env = Environment(
        loader=FileSystemLoader(TEMPLATE_DIR),
        undefined=StrictUndefined,
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True,
    )
    env.filters["sig"] = significant
    return env


def render(template_name: str, **context: Any) -> str:
    return _environment().get_template(template_name).render(**context)


def _attempt_report(attempt: RakingAttempt) -> dict:
    entry: dict[str, Any] = {
        "terms": attempt.terms.labels(),
        "raking_terms": attempt.raking_terms.labels(),
        "converged": attempt.converged,
        "failure": attempt.failure,
    }
    if attempt.nps_fit is not None:
        fit = attempt.nps_fit
        entry["propensity"] = {
            "loglik": fit.loglik,
            "iterations": fit.iterations,
            "converged": fit.converged,
            "stopped_by": fit.stopped_by,
            "score_norm": fit.score_norm,
            "coefficients": fit.coefficients(),
        }
    if attempt.raking is not None:
        entry["raking"] = {
            "passes": attempt.raking.passes,
            "converged": attempt.raking.converged,
            "max_residual": attempt.raking.max_residual,
            "message": attempt.raking.message,
        }
    return entry


def fit_report(
    result: RailsResult,
    options: dict,
    schema: dict[str, list[str]],
    main_terms: TermSet,
    candidate_pool: TermSet,
    constraints: Optional[ConstraintReport] = None,
) -> dict:
    """Everything needed to audit and replay one weighting run."""
    trace = result.selection
    return {
        "converged": result.converged,
        "options": options,
        "schema": schema,
        "main_terms": main_terms.labels(),
        "candidate_pool": candidate_pool.labels(),
        "selection": {
            "initial_loglik": trace.initial_loglik,
            "stopped_reason": trace.stopped_reason.value,
            "steps": [
                {
                    "term": step.term.label,
                    "delta_loglik": step.delta_loglik,
                    "df": step.df,
                    "p_value": step.p_value,
                    "loglik": step.loglik,
                }
                for step in trace.steps
            ],
            "final_working_set": trace.final_working_set.labels(),
        },
        "removed_by_lifo": [term.label for term in result.removed_by_lifo],
        "final_terms": result.working_set.labels(),
        "raking_terms": result.raking_terms.labels(),
        "attempts": [_attempt_report(attempt) for attempt in result.attempts],
        "constraints": constraints.model_dump() if constraints is not None else None,
    }
