import math
from dataclasses import dataclass, field
from enum import Enum
from itertools import product
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field

INTERCEPT_LABEL = "(Intercept)"
TERM_SEPARATOR = ":"
POPULATION_SIZE_LABEL = "__N__"

Schema = tuple[tuple[str, tuple[str, ...]], ...]


class RailsError(Exception):
    """Base class for every error raised by the weighting engine."""
    pass


class SchemaError(RailsError, ValueError):
    """Unknown variable, undeclared level, malformed term or mismatched cohort schemas."""

    def __init__(self, message: str, diff: Optional[dict] = None):
        super().__init__(message)
        self.diff = diff or {}


class ParseError(SchemaError):
    """Malformed cohort or margin file."""

    def __init__(self, message: str, line: Optional[int] = None):
        location = f"line {line}: " if line is not None else ""
        super().__init__(f"{location}{message}")
        self.line = line


class ShapeError(RailsError, ValueError):
    """Arrays whose dimensions do not line up."""
    pass


class NumericError(RailsError, ArithmeticError):
    """Non-finite likelihood, weight or total."""
    pass


def make_schema(levels_by_variable: Mapping[str, Sequence[str]]) -> Schema:
    """Freeze a {variable: levels} mapping into the ordered schema tuple."""
    schema = []
    for name, levels in levels_by_variable.items():
        levels = tuple(str(level) for level in levels)
        if not levels:
            raise SchemaError(f"Variable '{name}' declares no levels")
        if len(set(levels)) != len(levels):
            raise SchemaError(f"Variable '{name}' declares duplicate levels: {list(levels)}")
        schema.append((str(name), levels))
    return tuple(schema)


@dataclass(frozen=True, eq=False)
class Cohort:
    """
    Rectangular table of categorical covariates.

    Values are held as integer codes into the schema's declared level order, so two
    cohorts built on one schema share one encoding. Probability cohorts carry design
    weights; non-probability cohorts usually carry the outcome.
    """
    schema: Schema
    codes: np.ndarray
    design_weight: Optional[np.ndarray] = None
    outcome: Optional[np.ndarray] = None
    ids: tuple[str, ...] = ()

    def __post_init__(self):
        codes = np.array(self.codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != len(self.schema):
            raise ShapeError(
                f"Codes must be (rows, {len(self.schema)}), got shape {codes.shape}"
            )
        n_rows = codes.shape[0]
        if n_rows == 0:
            raise SchemaError("Cohort must contain at least one row")
        for j, (name, levels) in enumerate(self.schema):
            column = codes[:, j]
            if column.min() < 0 or column.max() >= len(levels):
                raise SchemaError(f"Variable '{name}' has codes outside its {len(levels)} levels")
        codes.setflags(write=False)
        object.__setattr__(self, "codes", codes)

        if self.design_weight is not None:
            weights = np.array(self.design_weight, dtype=float)
            if weights.shape != (n_rows,):
                raise ShapeError(f"Design weights must have {n_rows} entries")
            if not np.all(np.isfinite(weights)) or np.any(weights <= 0):
                raise SchemaError("Design weights must be strictly positive and finite")
            weights.setflags(write=False)
            object.__setattr__(self, "design_weight", weights)

        if self.outcome is not None:
            outcome = np.array(self.outcome, dtype=float)
            if outcome.shape != (n_rows,):
                raise ShapeError(f"Outcome must have {n_rows} entries")
            if not np.all((outcome == 0) | (outcome == 1)):
                raise SchemaError("Outcome values must be 0 or 1")
            outcome.setflags(write=False)
            object.__setattr__(self, "outcome", outcome)

        ids = tuple(str(i) for i in self.ids) if self.ids else tuple(str(i) for i in range(n_rows))
        if len(ids) != n_rows:
            raise ShapeError(f"Row ids must have {n_rows} entries")
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_records(
        cls,
        records: Sequence[Mapping[str, str]],
        schema: Schema,
        design_weight: Optional[Sequence[float]] = None,
        outcome: Optional[Sequence[float]] = None,
        ids: Optional[Sequence[str]] = None,
    ) -> "Cohort":
        """Encode label records against a declared schema."""
        if not records:
            raise SchemaError("Cohort must contain at least one row")
        lookup = [{level: code for code, level in enumerate(levels)} for _, levels in schema]
        codes = np.empty((len(records), len(schema)), dtype=np.int64)
        for i, record in enumerate(records):
            for j, (name, levels) in enumerate(schema):
                if name not in record:
                    raise SchemaError(f"Row {i} has no value for variable '{name}'")
                value = str(record[name])
                if value not in lookup[j]:
                    raise SchemaError(
                        f"Row {i}: level '{value}' is not declared for variable '{name}' "
                        f"(declared: {list(levels)})"
                    )
                codes[i, j] = lookup[j][value]
        return cls(
            schema=schema,
            codes=codes,
            design_weight=design_weight,
            outcome=outcome,
            ids=tuple(ids) if ids is not None else (),
        )

    @property
    def n_rows(self) -> int:
        return self.codes.shape[0]

    def __len__(self) -> int:
        return self.n_rows

    @property
    def variables(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.schema)

    def levels(self, variable: str) -> tuple[str, ...]:
        for name, levels in self.schema:
            if name == variable:
                return levels
        raise SchemaError(f"Unknown variable '{variable}'")

    def column(self, variable: str) -> np.ndarray:
        """Level codes of one variable."""
        try:
            j = self.variables.index(variable)
        except ValueError:
            raise SchemaError(f"Unknown variable '{variable}'") from None
        return self.codes[:, j]

    def require_variables(self, names: Iterable[str]):
        known = set(self.variables)
        for name in names:
            if name not in known:
                raise SchemaError(f"Unknown variable '{name}'")

    def subset(self, rows: np.ndarray) -> "Cohort":
        """Cohort restricted to a boolean mask or an index array."""
        rows = np.asarray(rows)
        if rows.dtype == bool:
            rows = np.flatnonzero(rows)
        return Cohort(
            schema=self.schema,
            codes=self.codes[rows],
            design_weight=None if self.design_weight is None else self.design_weight[rows],
            outcome=None if self.outcome is None else self.outcome[rows],
            ids=tuple(self.ids[i] for i in rows),
        )

    def stack(self, other: "Cohort") -> "Cohort":
        """Rows of this cohort followed by rows of another cohort on the same schema."""
        if other.schema != self.schema:
            raise SchemaError("Cannot stack cohorts with different schemas")
        return Cohort(schema=self.schema, codes=np.vstack([self.codes, other.codes]))


@dataclass(frozen=True, eq=False)
class Term:
    """
    Main effect (one variable) or interaction (several variables).

    Equality ignores listing order: a:b and b:a are the same term. The listing order
    is kept because margin cell labels are written in it.
    """
    variables: tuple[str, ...]

    def __post_init__(self):
        variables = tuple(str(v).strip() for v in self.variables)
        if not variables or any(not v for v in variables):
            raise SchemaError("A term needs at least one non-empty variable name")
        if len(set(variables)) != len(variables):
            raise SchemaError(f"Term '{TERM_SEPARATOR.join(variables)}' repeats a variable")
        object.__setattr__(self, "variables", variables)

    @classmethod
    def parse(cls, text: str) -> "Term":
        return cls(tuple(text.split(TERM_SEPARATOR)))

    @property
    def order(self) -> int:
        return len(self.variables)

    @property
    def label(self) -> str:
        return TERM_SEPARATOR.join(self.variables)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Term):
            return NotImplemented
        return frozenset(self.variables) == frozenset(other.variables)

    def __hash__(self) -> int:
        return hash(frozenset(self.variables))

    def __str__(self) -> str:
        return self.label

    def __repr__(self) -> str:
        return f"Term({self.label!r})"


class TermSet:
    """Ordered, duplicate-free collection of terms. The order is the LIFO stack order."""

    __slots__ = ("_terms",)

    def __init__(self, terms: Iterable[Term] = ()):
        terms = tuple(terms)
        if len(set(terms)) != len(terms):
            raise SchemaError(f"Duplicate terms in {[t.label for t in terms]}")
        self._terms = terms

    @classmethod
    def unique(cls, terms: Iterable[Term]) -> "TermSet":
        """Build a TermSet keeping the first occurrence of each term."""
        seen: list[Term] = []
        for term in terms:
            if term not in seen:
                seen.append(term)
        return cls(seen)

    @classmethod
    def parse(cls, labels: Iterable[str]) -> "TermSet":
        return cls.unique(Term.parse(label) for label in labels)

    def __iter__(self) -> Iterator[Term]:
        return iter(self._terms)

    def __len__(self) -> int:
        return len(self._terms)

    def __getitem__(self, index: int) -> Term:
        return self._terms[index]

    def __contains__(self, term: object) -> bool:
        return term in self._terms

    def __eq__(self, other) -> bool:
        if not isinstance(other, TermSet):
            return NotImplemented
        return self._terms == other._terms

    def __hash__(self) -> int:
        return hash(self._terms)

    def __repr__(self) -> str:
        return f"TermSet({self.labels()!r})"

    def add(self, term: Term) -> "TermSet":
        if term in self._terms:
            raise SchemaError(f"Term '{term.label}' is already present")
        return TermSet(self._terms + (term,))

    def remove(self, term: Term) -> "TermSet":
        if term not in self._terms:
            raise SchemaError(f"Term '{term.label}' is not present")
        return TermSet(t for t in self._terms if t != term)

    def union(self, other: Iterable[Term]) -> "TermSet":
        return TermSet.unique(tuple(self._terms) + tuple(other))

    def difference(self, other: Iterable[Term]) -> "TermSet":
        other = tuple(other)
        return TermSet(t for t in self._terms if t not in other)

    def main_effects(self) -> "TermSet":
        return TermSet(t for t in self._terms if t.order == 1)

    def variables(self) -> tuple[str, ...]:
        """Variables in first-appearance order."""
        seen: list[str] = []
        for term in self._terms:
            for name in term.variables:
                if name not in seen:
                    seen.append(name)
        return tuple(seen)

    def labels(self) -> list[str]:
        return [t.label for t in self._terms]


ColumnKey = tuple[Optional[Term], str]


def cell_label(levels: Sequence[str]) -> str:
    return TERM_SEPARATOR.join(levels)


def column_label(key: ColumnKey) -> str:
    term, cell = key
    if term is None:
        return INTERCEPT_LABEL
    return f"{term.label}={cell}"


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """
    Dense numeric expansion of a TermSet over a cohort.

    Column 0 is the intercept; every other column is a 0/1 indicator of one
    non-reference cell of a term. `candidate_columns` is the layout before unobserved
    and collinear columns were removed; `aliased` indexes into it. `empty` lists the
    aliased columns that were dropped because no row falls in their cell.
    """
    values: np.ndarray
    column_map: tuple[ColumnKey, ...]
    terms: TermSet
    candidate_columns: tuple[ColumnKey, ...] = ()
    aliased: tuple[int, ...] = ()
    empty: tuple[int, ...] = ()
    intercept_index: int = 0
    schema: Schema = ()

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != len(self.column_map):
            raise ShapeError(
                f"Design values {values.shape} do not match {len(self.column_map)} columns"
            )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if not self.candidate_columns:
            object.__setattr__(self, "candidate_columns", self.column_map)

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_columns(self) -> int:
        return self.values.shape[1]

    @property
    def column_labels(self) -> list[str]:
        return [column_label(key) for key in self.column_map]

    @property
    def aliased_columns(self) -> list[ColumnKey]:
        return [self.candidate_columns[i] for i in self.aliased]

    def columns_for(self, term: Term) -> list[int]:
        return [j for j, (t, _) in enumerate(self.column_map) if t is not None and t == term]

    def reference_level(self, variable: str) -> str:
        for name, levels in self.schema:
            if name == variable:
                return levels[0]
        raise SchemaError(f"Unknown variable '{variable}'")

    def column_index(self, term: Term, cell: str) -> Optional[int]:
        for j, key in enumerate(self.column_map):
            if key[0] is not None and key[0] == term and key[1] == cell:
                return j
        return None

    def take_rows(self, rows) -> "DesignMatrix":
        """Same columns, a subset of rows (used to split stacked cohorts)."""
        return DesignMatrix(
            values=self.values[rows],
            column_map=self.column_map,
            terms=self.terms,
            candidate_columns=self.candidate_columns,
            aliased=self.aliased,
            empty=self.empty,
            intercept_index=self.intercept_index,
            schema=self.schema,
        )

    def take_columns(self, columns: Sequence[int], empty: Sequence[int] = ()) -> "DesignMatrix":
        """Same rows, a subset of columns; dropped columns join `aliased`.

        `empty` adds candidate indices to the unobserved-cell list.
        """
        columns = list(columns)
        kept = {self.candidate_columns.index(self.column_map[j]) for j in columns}
        return DesignMatrix(
            values=self.values[:, columns],
            column_map=tuple(self.column_map[j] for j in columns),
            terms=self.terms,
            candidate_columns=self.candidate_columns,
            aliased=tuple(i for i in range(len(self.candidate_columns)) if i not in kept),
            empty=tuple(sorted(set(self.empty) | set(empty))),
            intercept_index=self.intercept_index,
            schema=self.schema,
        )


@dataclass(frozen=True, eq=False)
class MarginTargets:
    """
    Population totals for term cells plus the population size N.

    Cells are keyed by their {variable: level} assignment internally, so a margin
    written for b:a is found when the design asks for a:b.
    """
    population_size: float
    entries: dict[tuple[Term, str], float] = field(default_factory=dict)

    def __post_init__(self):
        size = float(self.population_size)
        if not math.isfinite(size) or size <= 0:
            raise SchemaError(f"Population size must be positive and finite, got {size}")
        object.__setattr__(self, "population_size", size)

        by_term: dict[Term, dict[frozenset, float]] = {}
        for (term, cell), total in self.entries.items():
            total = float(total)
            if not math.isfinite(total) or total < 0:
                raise SchemaError(f"Margin {term.label}={cell} must be finite and >= 0")
            levels = cell.split(TERM_SEPARATOR)
            if len(levels) != term.order:
                raise SchemaError(
                    f"Cell '{cell}' does not give one level per variable of '{term.label}'"
                )
            key = frozenset(zip(term.variables, levels))
            cells = by_term.setdefault(term, {})
            if key in cells:
                raise SchemaError(f"Margin {term.label}={cell} is listed twice")
            cells[key] = total

        for term, cells in by_term.items():
            term_sum = math.fsum(cells.values())
            if abs(term_sum - size) > 1e-9 * size:
                raise SchemaError(
                    f"Cells of '{term.label}' sum to {term_sum!r}, not the population "
                    f"size {size!r}"
                )
        object.__setattr__(self, "_by_term", by_term)

    def terms(self) -> TermSet:
        return TermSet(self._by_term.keys())

    def has_term(self, term: Term) -> bool:
        return term in self._by_term

    def total(self, term: Term, levels: Mapping[str, str]) -> float:
        """Target total of one cell; cells a margin does not list are zero."""
        if term not in self._by_term:
            raise SchemaError(f"No margins for term '{term.label}'")
        key = frozenset((name, levels[name]) for name in term.variables)
        return self._by_term[term].get(key, 0.0)

    def restrict(self, terms: Iterable[Term]) -> "MarginTargets":
        terms = tuple(terms)
        return MarginTargets(
            population_size=self.population_size,
            entries={k: v for k, v in self.entries.items() if k[0] in terms},
        )

    def validate_schema(self, schema: Schema):
        """Every margin variable and level must exist in the schema."""
        declared = dict(schema)
        for term, cell in self.entries:
            for name, level in zip(term.variables, cell.split(TERM_SEPARATOR)):
                if name not in declared:
                    raise SchemaError(f"Margins reference unknown variable '{name}'")
                if level not in declared[name]:
                    raise SchemaError(
                        f"Margins reference undeclared level '{level}' of variable '{name}'"
                    )


def term_cells(term: Term, schema: Schema) -> list[tuple[str, ...]]:
    """Every cell of a term (all level combinations) in schema order."""
    declared = dict(schema)
    return list(product(*(declared[name] for name in term.variables)))


class StoppedReason(str, Enum):
    """Why greedy selection stopped adding terms."""
    NO_SIGNIFICANT_CANDIDATE = "no-significant-candidate"
    POOL_EXHAUSTED = "pool-exhausted"
    MAX_TERMS_REACHED = "max-terms-reached"


class NpsOptions(BaseModel):
    """Newton-Raphson controls for the nested propensity score."""
    max_iterations: int = Field(100, ge=1)
    step_tolerance: float = Field(1e-8, gt=0)
    score_tolerance: float = Field(1e-6, gt=0)
    max_step_halvings: int = Field(20, ge=0)
    ridge: float = Field(0.0, ge=0)


class RakingOptions(BaseModel):
    """
    Iterative proportional fitting controls.

    A run is converged once every relative residual is within constraint_tolerance;
    sweeping continues until polish_tolerance or max_passes so that the result does not
    depend on the constraint order.
    """
    constraint_tolerance: float = Field(1e-6, gt=0)
    polish_tolerance: float = Field(1e-12, gt=0)
    absolute_floor: float = Field(1e-8, gt=0)
    max_passes: int = Field(200, ge=1)
    max_weight_ratio: Optional[float] = Field(None, gt=1)


class SelectionOptions(BaseModel):
    """
    Greedy selection and LIFO controls.

    protected_terms are term labels ("a", "a:b"); None protects every main effect.
    LIFO only ever pops selected pool terms, so protecting one keeps it in place.
    """
    alpha: float = Field(0.05, gt=0, lt=1)
    max_added_terms: Optional[int] = Field(None, ge=0)
    protected_terms: Optional[list[str]] = None
    lifo: bool = True
    n_jobs: int = Field(1, ge=1)

    def protected(self, main_terms: TermSet) -> TermSet:
        if self.protected_terms is None:
            return main_terms.main_effects()
        return TermSet.parse(self.protected_terms)


def schema_diff(
    left: Schema,
    right: Schema,
    names: tuple[str, str] = ("non_probability", "probability"),
) -> dict[str, dict[str, list[str]]]:
    """Per-variable level lists wherever two schemas disagree."""
    a, b = dict(left), dict(right)
    diff = {}
    for variable in list(a) + [v for v in b if v not in a]:
        if a.get(variable) != b.get(variable):
            diff[variable] = {
                names[0]: list(a.get(variable, ())),
                names[1]: list(b.get(variable, ())),
            }
    return diff
