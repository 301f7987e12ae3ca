"""Shared fixtures: small cohorts whose selection and raking behaviour is known by construction."""

from itertools import product

import numpy as np
import pytest

from models import Cohort, MarginTargets, TermSet, make_schema
from utils.design import population_margins

ABC_SCHEMA = make_schema({"a": ["0", "1"], "b": ["0", "1"], "c": ["0", "1"]})
MAINS = TermSet.parse(["a", "b", "c"])
POOL = TermSet.parse(["a:b", "a:c", "b:c"])


def cohort_from_counts(schema, counts: dict, outcome: dict = None) -> Cohort:
    """Non-probability cohort with `counts[cell]` rows in each cell (cells keyed by level codes)."""
    codes, y = [], []
    for cell, n in counts.items():
        codes.extend([cell] * n)
        if outcome is not None:
            positives = outcome[cell]
            y.extend([1.0] * positives + [0.0] * (n - positives))
    return Cohort(
        schema=schema,
        codes=np.array(codes, dtype=np.int64).reshape(-1, len(schema)),
        outcome=y if outcome is not None else None,
    )


def cohort_from_weights(schema, weights: dict) -> Cohort:
    """Probability cohort with one row per cell carrying the given design weight."""
    cells = list(weights)
    return Cohort(
        schema=schema,
        codes=np.array(cells, dtype=np.int64),
        design_weight=[weights[cell] for cell in cells],
    )


def abc_cells():
    return list(product((0, 1), repeat=3))


@pytest.fixture
def planted_cohorts():
    """Selection depends on a and b only through their interaction."""
    counts = {cell: 300 if cell[0] == cell[1] == 1 else 50 for cell in abc_cells()}
    np_cohort = cohort_from_counts(ABC_SCHEMA, counts)
    p_cohort = cohort_from_weights(ABC_SCHEMA, {cell: 1000.0 for cell in abc_cells()})
    return np_cohort, p_cohort


@pytest.fixture
def structural_zero_cohorts():
    """No non-probability rows with a = b = 1, while the population has them.

    Returns the cohorts and margins for a, b, c and a:b taken from the probability cohort.
    """
    counts = {cell: 0 if cell[0] == cell[1] == 1 else 100 for cell in abc_cells()}
    counts = {cell: n for cell, n in counts.items() if n}
    np_cohort = cohort_from_counts(ABC_SCHEMA, counts)
    p_cohort = cohort_from_weights(
        ABC_SCHEMA,
        {cell: 500.0 if cell[0] == cell[1] == 1 else 1000.0 for cell in abc_cells()},
    )
    targets = population_margins(
        p_cohort, MAINS.union(TermSet.parse(["a:b"])), weights=p_cohort.design_weight
    )
    return np_cohort, p_cohort, targets


@pytest.fixture
def two_by_two():
    """Four rows, one per cell of two binary factors, with margins {A: 3, B: 1} and {0: 2, 1: 2}."""
    schema = make_schema({"f1": ["A", "B"], "f2": ["0", "1"]})
    cohort = Cohort(schema=schema, codes=[[0, 0], [0, 1], [1, 0], [1, 1]])
    mains = TermSet.parse(["f1", "f2"])
    targets = MarginTargets(
        population_size=4.0,
        entries={
            (mains[0], "A"): 3.0,
            (mains[0], "B"): 1.0,
            (mains[1], "0"): 2.0,
            (mains[1], "1"): 2.0,
        },
    )
    return cohort, mains, targets


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
