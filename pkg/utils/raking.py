"""Generalized raking with the multiplicative distance, solved by iterative
proportional fitting.

Each targeted term contributes one constraint per non-reference cell. The reference
cell of a main effect is swept as well (its indicator is the complement of the term's
columns); it is implied by the other cells and the population total, so the calibration
problem is unchanged, but a sweep over a complete table then matches classical IPF.
The population total is enforced by rescaling all weights after every sweep.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from models import (
    TERM_SEPARATOR,
    DesignMatrix,
    MarginTargets,
    RailsError,
    RakingOptions,
    SchemaError,
    ShapeError,
    Term,
)

logger = logging.getLogger(__name__)


class RakingError(RailsError):
    """Raking cannot satisfy a constraint; the LIFO layer reacts to it."""

    def __init__(self, message: str, term: Optional[Term] = None, cell: str = ""):
        super().__init__(message)
        self.term = term
        self.cell = cell


class StructuralZeroError(RakingError):
    """A cell with a positive target has no sample support."""
    pass


class ZeroTargetError(RakingError):
    """A cell with sample support has a zero target; multiplicative updates cannot reach it."""
    pass


@dataclass(frozen=True, eq=False)
class Constraint:
    """One raking margin: rows in the cell and their target total."""
    term: Term
    cell: str
    target: float
    indicator: np.ndarray
    column: Optional[int] = None

    @property
    def label(self) -> str:
        return f"{self.term.label}={self.cell}"


@dataclass(frozen=True, eq=False)
class RakingResult:
    """Calibrated weights and the state of every constraint at exit."""
    weights: np.ndarray
    converged: bool
    passes: int
    residuals: np.ndarray
    log_multipliers: np.ndarray
    constraints: tuple[Constraint, ...] = ()
    log_scale: float = 0.0
    message: str = ""

    @property
    def max_residual(self) -> float:
        return float(self.residuals.max()) if self.residuals.size else 0.0


class ConstraintResidual(BaseModel):
    term: str
    cell: str
    target: float
    achieved: float
    relative_residual: float


class ConstraintReport(BaseModel):
    """Constraint residuals and weight distribution summary."""
    residuals: list[ConstraintResidual]
    max_relative_residual: float
    total_weight: float
    total_residual: float
    min_weight: float
    max_weight: float
    design_effect: float


def _cell_levels(term: Term, cell: str) -> dict[str, str]:
    return dict(zip(term.variables, cell.split(TERM_SEPARATOR)))


def raking_constraints(
    X: DesignMatrix,
    targets: MarginTargets,
    terms: Optional[Iterable[Term]] = None,
) -> list[Constraint]:
    """Constraints for every targeted term of the design, in term order.

    Cells whose column was dropped as empty keep an all-false indicator, so the
    caller can tell a structural zero from a satisfied empty cell.
    """
    terms = [t for t in X.terms if targets.has_term(t)] if terms is None else list(terms)
    empty_keys = {X.candidate_columns[j] for j in X.empty}
    collinear_keys = {X.candidate_columns[j] for j in X.aliased} - empty_keys
    no_rows = np.zeros(X.n_rows, dtype=bool)

    constraints: list[Constraint] = []
    for term in terms:
        if term not in X.terms:
            raise SchemaError(f"Term '{term.label}' is not in the raking design")
        if not targets.has_term(term):
            raise SchemaError(f"No margins for raking term '{term.label}'")
        keys = [key for key in X.candidate_columns if key[0] is not None and key[0] == term]

        if term.order == 1 and not any(key in collinear_keys for key in keys):
            present = X.columns_for(term)
            reference = np.ones(X.n_rows, dtype=bool)
            if present:
                reference = X.values[:, present].sum(axis=1) == 0
            level = X.reference_level(term.variables[0])
            constraints.append(
                Constraint(
                    term=term,
                    cell=level,
                    target=targets.total(term, {term.variables[0]: level}),
                    indicator=reference,
                )
            )

        for key in keys:
            _, cell = key
            target = targets.total(term, _cell_levels(term, cell))
            if key in collinear_keys:
                logger.warning(
                    "Constraint %s=%s is collinear in the design and is not swept",
                    term.label, cell,
                )
                continue
            column = X.column_index(term, cell)
            indicator = no_rows if column is None else X.values[:, column] > 0
            constraints.append(
                Constraint(term=term, cell=cell, target=target, indicator=indicator, column=column)
            )
    return constraints


def _residuals(weights: np.ndarray, constraints: Sequence[Constraint], floor: float) -> np.ndarray:
    achieved = np.array([weights[c.indicator].sum() for c in constraints])
    targets = np.array([c.target for c in constraints])
    return np.abs(achieved - targets) / np.maximum(targets, floor)


def rake(
    base: np.ndarray,
    X: DesignMatrix,
    targets: MarginTargets,
    opts: Optional[RakingOptions] = None,
    terms: Optional[Iterable[Term]] = None,
    constraints: Optional[Sequence[Constraint]] = None,
) -> RakingResult:
    """Calibrate base weights to margin totals by iterative proportional fitting.

    Raises StructuralZeroError or ZeroTargetError when a constraint cannot be met by
    multiplicative updates; returns converged=False when max_passes sweeps do not bring
    every relative residual within tolerance. A converged run keeps sweeping until the
    residuals reach polish_tolerance. With max_weight_ratio every weight stays within
    that factor of its base weight.
    """
    opts = opts or RakingOptions()
    base = np.asarray(base, dtype=float)
    if base.shape != (X.n_rows,):
        raise ShapeError(f"{base.shape} base weights for {X.n_rows} design rows")
    if not np.all(np.isfinite(base)) or np.any(base <= 0):
        raise ShapeError("Base weights must be strictly positive and finite")
    if constraints is None:
        constraints = raking_constraints(X, targets, terms)

    active: list[Constraint] = []
    for constraint in constraints:
        supported = bool(constraint.indicator.any())
        if not supported and constraint.target > 0:
            raise StructuralZeroError(
                f"No sample rows in cell {constraint.label} with target {constraint.target:g}",
                term=constraint.term,
                cell=constraint.cell,
            )
        if supported and constraint.target == 0:
            raise ZeroTargetError(
                f"Cell {constraint.label} has sample rows but a zero target",
                term=constraint.term,
                cell=constraint.cell,
            )
        if supported:
            active.append(constraint)

    population_size = targets.population_size
    floor = opts.absolute_floor
    tolerance = opts.constraint_tolerance
    polish = min(opts.polish_tolerance, tolerance)
    log_multipliers = np.zeros(len(active))

    residuals = _residuals(base, active, floor)
    total_ok = abs(base.sum() - population_size) <= 1e-9 * population_size
    if total_ok and np.all(residuals <= tolerance):
        return RakingResult(
            weights=base.copy(),
            converged=True,
            passes=1,
            residuals=residuals,
            log_multipliers=log_multipliers,
            constraints=tuple(active),
        )

    if opts.max_weight_ratio is not None:
        lower, upper = base / opts.max_weight_ratio, base * opts.max_weight_ratio
    weights = base.copy()
    log_scale = 0.0
    converged = False
    message = ""
    passes = 0
    for passes in range(1, opts.max_passes + 1):
        previous = weights.copy()
        with np.errstate(over="ignore", divide="ignore", invalid="ignore"):
            for k, constraint in enumerate(active):
                current = weights[constraint.indicator].sum()
                factor = constraint.target / current
                weights[constraint.indicator] *= factor
                log_multipliers[k] += math.log(factor) if factor > 0 else -math.inf
                if opts.max_weight_ratio is not None:
                    np.clip(weights, lower, upper, out=weights)
            scale = population_size / weights.sum()
            weights *= scale
            if opts.max_weight_ratio is not None:
                np.clip(weights, lower, upper, out=weights)
        if not (np.all(np.isfinite(weights)) and np.all(weights > 0)):
            weights = previous
            message = f"weights degenerated during pass {passes}"
            break
        log_scale += math.log(scale)
        residuals = _residuals(weights, active, floor)
        logger.debug("IPF pass %d: max relative residual %.3g", passes, residuals.max(initial=0))
        converged = bool(np.all(residuals <= tolerance))
        if converged and np.all(residuals <= polish):
            break
    else:
        if not converged:
            message = f"no convergence after {opts.max_passes} passes"

    residuals = _residuals(weights, active, floor)
    if converged:
        logger.debug("Raking converged after %d passes", passes)
    else:
        logger.info("Raking did not converge: %s", message)
    return RakingResult(
        weights=weights,
        converged=converged,
        passes=passes,
        residuals=residuals,
        log_multipliers=log_multipliers,
        constraints=tuple(active),
        log_scale=log_scale,
        message=message,
    )


def check_constraints(
    weights: np.ndarray,
    X: DesignMatrix,
    targets: MarginTargets,
    terms: Optional[Iterable[Term]] = None,
    absolute_floor: float = RakingOptions().absolute_floor,
) -> ConstraintReport:
    """Relative residual of every constraint plus weight diagnostics."""
    weights = np.asarray(weights, dtype=float)
    if weights.shape != (X.n_rows,):
        raise ShapeError(f"{weights.shape} weights for {X.n_rows} design rows")
    constraints = raking_constraints(X, targets, terms)
    rows = []
    for constraint in constraints:
        achieved = float(weights[constraint.indicator].sum())
        rows.append(
            ConstraintResidual(
                term=constraint.term.label,
                cell=constraint.cell,
                target=constraint.target,
                achieved=achieved,
                relative_residual=abs(achieved - constraint.target)
                / max(constraint.target, absolute_floor),
            )
        )
    total = float(weights.sum())
    squares = float(np.dot(weights, weights))
    return ConstraintReport(
        residuals=rows,
        max_relative_residual=max((r.relative_residual for r in rows), default=0.0),
        total_weight=total,
        total_residual=total - targets.population_size,
        min_weight=float(weights.min()),
        max_weight=float(weights.max()),
        design_effect=squares * len(weights) / total**2 if total > 0 else math.inf,
    )
