"""Term expansion and design-matrix construction.

Every downstream stage (propensity, raking, selection) sees covariates through the
same treatment-coded indicators: the first declared level of each variable is the
reference, a main effect with L levels gives L-1 columns, and an interaction gives one
column per joint cell of non-reference levels.
"""

import logging
from dataclasses import dataclass
from itertools import combinations, product
from typing import Iterable, Optional, Sequence

import numpy as np

from models import (
    INTERCEPT_LABEL,
    Cohort,
    ColumnKey,
    DesignMatrix,
    MarginTargets,
    Schema,
    SchemaError,
    Term,
    TermSet,
    cell_label,
    term_cells,
)

logger = logging.getLogger(__name__)

# Reduced-column norm below this fraction of the largest pivot marks a column as aliased.
PIVOT_TOLERANCE = 1e-10


def expand_terms(
    main_variables: Sequence[str],
    max_order: int,
    extra_terms: Iterable[Term] = (),
    schema: Optional[Schema] = None,
) -> TermSet:
    """All terms of order <= max_order over the variables, plus extra terms.

    Result is deduplicated and sorted by (order, label), so main effects come first.
    """
    if max_order < 1:
        raise SchemaError(f"max_order must be >= 1, got {max_order}")
    variables = sorted(dict.fromkeys(main_variables))
    extra_terms = list(extra_terms)
    if schema is not None:
        declared = {name for name, _ in schema}
        for name in variables + [v for t in extra_terms for v in t.variables]:
            if name not in declared:
                raise SchemaError(f"Unknown variable '{name}'")

    generated = [
        Term(combo)
        for order in range(1, min(max_order, len(variables)) + 1)
        for combo in combinations(variables, order)
    ]
    terms = TermSet.unique(generated + extra_terms)
    return TermSet(sorted(terms, key=lambda t: (t.order, t.label)))


def candidate_columns(schema: Schema, terms: TermSet) -> list[tuple[ColumnKey, tuple[int, ...]]]:
    """Column keys with the level codes each indicator tests, before any dropping."""
    declared = dict(schema)
    columns: list[tuple[ColumnKey, tuple[int, ...]]] = []
    for term in terms:
        for name in term.variables:
            if name not in declared:
                raise SchemaError(f"Unknown variable '{name}' in term '{term.label}'")
        level_ranges = [range(1, len(declared[name])) for name in term.variables]
        for codes in product(*level_ranges):
            levels = [declared[name][code] for name, code in zip(term.variables, codes)]
            columns.append(((term, cell_label(levels)), codes))
    return columns


def limited_pivot_rank(values: np.ndarray, tolerance: float = PIVOT_TOLERANCE) -> list[int]:
    """Indices of columns kept by a left-to-right QR with limited pivoting.

    Columns are orthogonalized in order (classical Gram-Schmidt, applied twice); a
    column whose reduced norm falls below `tolerance` times the largest pivot seen so far
    is aliased and moved out, so earlier columns are never displaced by later ones.
    """
    n_rows, n_cols = values.shape
    basis = np.empty((n_rows, min(n_rows, n_cols)))
    kept: list[int] = []
    largest = 0.0
    for j in range(n_cols):
        column = values[:, j].astype(float, copy=True)
        k = len(kept)
        if k:
            q = basis[:, :k]
            for _ in range(2):
                column -= q @ (q.T @ column)
        pivot = float(np.linalg.norm(column))
        if pivot == 0.0 or pivot <= tolerance * largest or k >= basis.shape[1]:
            continue
        largest = max(largest, pivot)
        basis[:, k] = column / pivot
        kept.append(j)
    return kept


def build_design_matrix(cohort: Cohort, terms: TermSet, drop_aliased: bool = True) -> DesignMatrix:
    """Intercept plus treatment-coded indicators of every term cell.

    All-zero columns (cells unobserved in the cohort) are always dropped and reported in
    `aliased`; with drop_aliased, columns collinear with earlier ones are dropped too.
    """
    cohort.require_variables(terms.variables())
    layout = candidate_columns(cohort.schema, terms)
    keys: list[ColumnKey] = [(None, INTERCEPT_LABEL)] + [key for key, _ in layout]

    values = np.empty((cohort.n_rows, len(keys)))
    values[:, 0] = 1.0
    for j, ((term, _), codes) in enumerate(layout, start=1):
        indicator = np.ones(cohort.n_rows, dtype=bool)
        for name, code in zip(term.variables, codes):
            indicator &= cohort.column(name) == code
        values[:, j] = indicator

    nonzero = [0] + [j for j in range(1, len(keys)) if values[:, j].any()]
    empty = tuple(j for j in range(1, len(keys)) if not values[:, j].any())
    kept = nonzero
    if drop_aliased:
        kept = [nonzero[i] for i in limited_pivot_rank(values[:, nonzero])]
        if kept[0] != 0:
            raise SchemaError("Intercept column was judged aliased")
    kept_set = set(kept)
    aliased = tuple(j for j in range(len(keys)) if j not in kept_set)
    if aliased:
        logger.debug(
            "Dropped %d of %d design columns: %s",
            len(aliased),
            len(keys),
            [f"{keys[j][0].label}={keys[j][1]}" for j in aliased],
        )

    return DesignMatrix(
        values=values[:, kept],
        column_map=tuple(keys[j] for j in kept),
        terms=terms,
        candidate_columns=tuple(keys),
        aliased=aliased,
        empty=empty,
        schema=cohort.schema,
    )


@dataclass(frozen=True)
class JointDesign:
    """One design over stacked cohorts, split back into its two row blocks."""
    design: DesignMatrix
    np_block: DesignMatrix
    p_block: DesignMatrix


def build_joint_design(
    np_cohort: Cohort,
    p_cohort: Cohort,
    terms: TermSet,
    drop_aliased: bool = True,
) -> JointDesign:
    """Design over NP rows followed by P rows, so both blocks share one column layout.

    The pseudo-likelihood curvature comes from the P rows alone, so with drop_aliased the
    columns are pivoted on the P block: a cell seen only in the NP cohort is dropped as
    unobserved and its rows fall back to the reference cell of that term.
    """
    stacked = np_cohort.stack(p_cohort)
    design = build_design_matrix(stacked, terms, drop_aliased=False)
    n_np = np_cohort.n_rows
    if drop_aliased:
        p_values = design.values[n_np:]
        unobserved = [j for j in range(design.n_columns) if not p_values[:, j].any()]
        if unobserved:
            logger.info(
                "Cells absent from the probability cohort: %s",
                [design.column_labels[j] for j in unobserved],
            )
        kept = limited_pivot_rank(p_values)
        if not kept or kept[0] != 0:
            raise SchemaError("Intercept column was judged aliased")
        design = design.take_columns(
            kept,
            empty=[design.candidate_columns.index(design.column_map[j]) for j in unobserved],
        )
    return JointDesign(
        design=design,
        np_block=design.take_rows(slice(0, n_np)),
        p_block=design.take_rows(slice(n_np, None)),
    )


def population_margins(
    cohort: Cohort,
    terms: TermSet,
    weights: Optional[np.ndarray] = None,
) -> MarginTargets:
    """Totals of every cell of every term over a fully observed cohort."""
    cohort.require_variables(terms.variables())
    weights = np.ones(cohort.n_rows) if weights is None else np.asarray(weights, dtype=float)
    entries: dict[tuple[Term, str], float] = {}
    for term in terms:
        shape = tuple(len(cohort.levels(name)) for name in term.variables)
        flat = np.ravel_multi_index(tuple(cohort.column(name) for name in term.variables), shape)
        totals = np.bincount(flat, weights=weights, minlength=int(np.prod(shape)))
        for index, levels in enumerate(term_cells(term, cohort.schema)):
            entries[(term, cell_label(levels))] = float(totals[index])
    return MarginTargets(population_size=float(weights.sum()), entries=entries)
