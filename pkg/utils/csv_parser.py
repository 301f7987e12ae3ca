"""CSV parsers for cohort tables, margin files and weight files."""

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from models import (
    POPULATION_SIZE_LABEL,
    TERM_SEPARATOR,
    Cohort,
    MarginTargets,
    ParseError,
    Schema,
    SchemaError,
    Term,
    make_schema,
)

WEIGHT_COLUMN = "_weight"
OUTCOME_COLUMN = "_outcome"
ID_COLUMN = "_id"
MARGIN_COLUMNS = ("term", "cell", "total")
WEIGHT_FILE_COLUMNS = ("id", "base_weight", "final_weight")


@dataclass(frozen=True)
class Table:
    """Header plus data rows, each row tagged with its 1-based file line number."""
    header: list[str]
    rows: list[tuple[int, dict[str, str]]]

    def column(self, name: str) -> list[str]:
        return [row[name] for _, row in self.rows]


def read_table(content: str) -> Table:
    """Split CSV content into a header and non-blank data rows."""
    sniffer = csv.Sniffer()
    try:
        dialect = sniffer.sniff(content[:2048], delimiters=",;\t")
    except csv.Error:
        dialect = csv.excel  # Default to comma-separated

    reader = csv.reader(io.StringIO(content), dialect)
    header: Optional[list[str]] = None
    rows: list[tuple[int, dict[str, str]]] = []
    for record in reader:
        line = reader.line_num
        if not any(cell.strip() for cell in record):
            continue
        cells = [cell.strip() for cell in record]
        if header is None:
            if len(set(cells)) != len(cells):
                raise ParseError(f"Duplicate column names in header: {cells}", line)
            header = cells
            continue
        if len(cells) != len(header):
            raise ParseError(f"Expected {len(header)} fields, found {len(cells)}", line)
        rows.append((line, dict(zip(header, cells))))

    if header is None:
        raise ParseError("File is empty")
    return Table(header=header, rows=rows)


def parse_float(text: str, what: str, line: int) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"{what} '{text}' is not a number", line) from None
    if not math.isfinite(value):
        raise ParseError(f"{what} '{text}' is not finite", line)
    return value


def infer_schema(table: Table, variables: Sequence[str]) -> Schema:
    """Levels of each variable as observed, in sorted order (the first is the reference)."""
    levels = {}
    for name in variables:
        observed = {row[name] for _, row in table.rows}
        levels[name] = sorted(observed)
    return make_schema(levels)


def covariate_columns(table: Table) -> list[str]:
    """Every column that is not reserved (reserved names start with an underscore)."""
    return [name for name in table.header if not name.startswith("_")]


def parse_cohort(
    content: str,
    schema: Optional[Schema] = None,
    variables: Optional[Sequence[str]] = None,
    require_weight: bool = False,
    outcome_column: Optional[str] = OUTCOME_COLUMN,
) -> Cohort:
    """Parse a cohort CSV against a declared schema, or infer the schema from the data.

    `_weight` holds design weights and `_id` row ids (0-based row numbers when absent).
    The outcome is read from `outcome_column` when that column exists.
    """
    table = read_table(content)
    if not table.rows:
        raise ParseError("Cohort file has a header but no data rows")
    if variables is None:
        variables = [v for v, _ in schema] if schema is not None else covariate_columns(table)
    for name in variables:
        if name not in table.header:
            raise SchemaError(f"Cohort file has no column for variable '{name}'")
    for line, row in table.rows:
        for name in variables:
            if not row[name]:
                raise ParseError(f"Missing value for variable '{name}'", line)
    if schema is None:
        schema = infer_schema(table, variables)

    lookup = {name: {level: code for code, level in enumerate(levels)} for name, levels in schema}
    codes = np.empty((len(table.rows), len(schema)), dtype=np.int64)
    for i, (line, row) in enumerate(table.rows):
        for j, (name, levels) in enumerate(schema):
            if row.get(name) not in lookup[name]:
                raise ParseError(
                    f"Level '{row.get(name)}' is not declared for variable '{name}' "
                    f"(declared: {list(levels)})",
                    line,
                )
            codes[i, j] = lookup[name][row[name]]

    weights = None
    if WEIGHT_COLUMN in table.header:
        weights = []
        for line, row in table.rows:
            value = parse_float(row[WEIGHT_COLUMN], "Design weight", line)
            if value <= 0:
                raise ParseError(f"Design weight must be positive, got {value}", line)
            weights.append(value)
    elif require_weight:
        raise SchemaError(f"Probability cohort needs a '{WEIGHT_COLUMN}' column")

    outcome = None
    if outcome_column is not None and outcome_column in table.header:
        outcome = [
            parse_binary(row[outcome_column], outcome_column, line) for line, row in table.rows
        ]

    ids = None
    if ID_COLUMN in table.header:
        ids = table.column(ID_COLUMN)
        if len(set(ids)) != len(ids):
            raise SchemaError(f"Column '{ID_COLUMN}' has duplicate ids")

    return Cohort(
        schema=schema,
        codes=codes,
        design_weight=weights,
        outcome=outcome,
        ids=tuple(ids) if ids is not None else (),
    )


def parse_binary(text: str, column: str, line: int) -> float:
    value = parse_float(text, f"Value of '{column}'", line)
    if value not in (0.0, 1.0):
        raise ParseError(f"Column '{column}' must be 0 or 1, got '{text}'", line)
    return value


def parse_margins(content: str) -> MarginTargets:
    """Parse a margin file: `term,cell,total` rows plus one `__N__` population-size row."""
    table = read_table(content)
    missing = [name for name in MARGIN_COLUMNS if name not in table.header]
    if missing:
        raise ParseError(f"Margin file is missing columns {missing}", 1)

    population_size = None
    entries: dict[tuple[Term, str], float] = {}
    seen: dict[tuple[Term, frozenset], int] = {}
    for line, row in table.rows:
        if row["term"] == POPULATION_SIZE_LABEL:
            if population_size is not None:
                raise ParseError(f"'{POPULATION_SIZE_LABEL}' is given twice", line)
            population_size = parse_float(row["total"], "Population size", line)
            continue
        try:
            term = Term.parse(row["term"])
        except SchemaError as e:
            raise ParseError(str(e), line) from None
        levels = row["cell"].split(TERM_SEPARATOR)
        if len(levels) != term.order or not all(levels):
            raise ParseError(
                f"Cell '{row['cell']}' does not give one level per variable of '{term.label}'",
                line,
            )
        key = (term, frozenset(zip(term.variables, levels)))
        if key in seen:
            raise ParseError(
                f"Margin {term.label}={row['cell']} repeats line {seen[key]}", line
            )
        seen[key] = line
        total = parse_float(row["total"], "Total", line)
        if total < 0:
            raise ParseError(f"Total must be >= 0, got {total}", line)
        entries[(term, row["cell"])] = total

    if population_size is None:
        raise ParseError(f"Margin file has no '{POPULATION_SIZE_LABEL}' row")
    return MarginTargets(population_size=population_size, entries=entries)


@dataclass(frozen=True, eq=False)
class WeightFile:
    ids: list[str]
    base_weight: np.ndarray
    final_weight: np.ndarray


def parse_weights(content: str) -> WeightFile:
    """Parse a weights file written by the fit command."""
    table = read_table(content)
    missing = [name for name in WEIGHT_FILE_COLUMNS if name not in table.header]
    if missing:
        raise ParseError(f"Weights file is missing columns {missing}", 1)
    base, final = [], []
    for line, row in table.rows:
        base.append(parse_float(row["base_weight"], "Base weight", line))
        final.append(parse_float(row["final_weight"], "Final weight", line))
    return WeightFile(
        ids=table.column("id"),
        base_weight=np.array(base),
        final_weight=np.array(final),
    )
