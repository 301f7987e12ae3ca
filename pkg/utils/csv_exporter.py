"""CSV export utilities.

Machine files carry every float with 17 significant digits so they re-read exactly.
"""

import csv
import io
from typing import Optional, Sequence

import numpy as np

from models import POPULATION_SIZE_LABEL, MarginTargets, Schema, cell_label, term_cells
from utils.simulation import ReplicationMetrics, ReplicationRecord


def format_number(value: Optional[float]) -> str:
    """Full-precision float for CSV; blank when absent."""
    if value is None:
        return ""
    return f"{float(value):.17g}"


def generate_weights_csv(
    ids: Sequence[str],
    base_weight: np.ndarray,
    final_weight: np.ndarray,
) -> str:
    """Generate the weights file: one row per non-probability row.

    Args:
        ids: Row ids of the non-probability cohort
        base_weight: Inverse estimated propensities
        final_weight: Calibrated weights

    Returns:
        CSV content as string
    """
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(["id", "base_weight", "final_weight"])
    for row_id, base, final in zip(ids, base_weight, final_weight):
        writer.writerow([row_id, format_number(base), format_number(final)])
    return output.getvalue()


def generate_margins_csv(targets: MarginTargets, schema: Optional[Schema] = None) -> str:
    """Write margins in the margin-file format, population size first.

    With a schema every cell of every term is written, unlisted cells as 0.
    """
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(["term", "cell", "total"])
    writer.writerow([POPULATION_SIZE_LABEL, "", format_number(targets.population_size)])
    if schema is None:
        for (term, cell), total in targets.entries.items():
            writer.writerow([term.label, cell, format_number(total)])
        return output.getvalue()

    for term in targets.terms():
        for levels in term_cells(term, schema):
            total = targets.total(term, dict(zip(term.variables, levels)))
            writer.writerow([term.label, cell_label(levels), format_number(total)])
    return output.getvalue()


METRIC_COLUMNS = [
    "estimator",
    "replications",
    "converged",
    "relative_bias",
    "avar",
    "evar",
    "nominal_cp",
    "oracle_cp",
    "divergent",
]


def generate_metrics_csv(metrics: Sequence[ReplicationMetrics], scenario: str) -> str:
    """One row per estimator, mirroring the simulation summary table."""
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(["scenario"] + METRIC_COLUMNS)
    for row in metrics:
        values = row.model_dump()
        writer.writerow(
            [scenario]
            + [
                format_number(values[name]) if isinstance(values[name], float) else values[name]
                for name in METRIC_COLUMNS
            ]
        )
    return output.getvalue()


RECORD_COLUMNS = [
    "replication",
    "seed",
    "estimator",
    "truth",
    "converged",
    "estimate",
    "variance",
    "ci_low",
    "ci_high",
    "message",
]


def generate_replications_csv(records: Sequence[ReplicationRecord]) -> str:
    """Long format: one row per replication and estimator."""
    output = io.StringIO()
    writer = csv.writer(output, lineterminator="\n")
    writer.writerow(RECORD_COLUMNS)
    for record in records:
        values = record.model_dump()
        writer.writerow(
            [
                format_number(values[name]) if isinstance(values[name], float) else values[name]
                for name in RECORD_COLUMNS
            ]
        )
    return output.getvalue()
