import numpy as np
import pytest

from models import INTERCEPT_LABEL, Cohort, SchemaError, Term, TermSet, make_schema
from utils.design import (
    build_design_matrix,
    build_joint_design,
    expand_terms,
    limited_pivot_rank,
    population_margins,
)


class TestExpandTerms:
    def test_order_one_has_no_interactions(self):
        assert expand_terms(["a", "b"], 1).labels() == ["a", "b"]

    def test_single_pair(self):
        assert expand_terms(["b", "a"], 2).labels() == ["a", "b", "a:b"]

    def test_three_variables_order_two(self):
        terms = expand_terms(["a", "b", "c"], 2)
        assert len(terms) == 6
        assert [t.order for t in terms] == [1, 1, 1, 2, 2, 2]

    def test_extra_terms_deduplicated(self):
        terms = expand_terms(["a", "b"], 2, extra_terms=[Term.parse("b:a")])
        assert len(terms) == 3

    def test_unknown_variable_against_schema(self):
        schema = make_schema({"a": ["0", "1"]})
        with pytest.raises(SchemaError):
            expand_terms(["a", "z"], 1, schema=schema)


class TestBuildDesignMatrix:
    def test_binary_treatment_coding(self):
        cohort = Cohort(schema=make_schema({"x": ["0", "1"]}), codes=[[0], [1], [0], [1]])
        X = build_design_matrix(cohort, TermSet.parse(["x"]))
        np.testing.assert_array_equal(X.values, [[1, 0], [1, 1], [1, 0], [1, 1]])
        assert X.column_labels == [INTERCEPT_LABEL, "x=1"]

    def test_empty_termset_is_intercept_only(self):
        cohort = Cohort(schema=make_schema({"x": ["0", "1"]}), codes=[[0], [1]])
        X = build_design_matrix(cohort, TermSet())
        assert X.n_columns == 1
        assert X.intercept_index == 0

    def test_collinear_indicator_dropped(self):
        schema = make_schema({"x1": ["0", "1"], "x2": ["0", "1"]})
        cohort = Cohort(schema=schema, codes=[[0, 0], [1, 1], [0, 0], [1, 1]])
        X = build_design_matrix(cohort, TermSet.parse(["x1", "x2"]))
        assert X.n_columns == 2
        assert X.column_labels == [INTERCEPT_LABEL, "x1=1"]
        assert [f"{t.label}={c}" for t, c in X.aliased_columns] == ["x2=1"]

    def test_collinear_columns_kept_without_drop(self):
        schema = make_schema({"x1": ["0", "1"], "x2": ["0", "1"]})
        cohort = Cohort(schema=schema, codes=[[0, 0], [1, 1]])
        X = build_design_matrix(cohort, TermSet.parse(["x1", "x2"]), drop_aliased=False)
        assert X.n_columns == 3

    def test_unobserved_cell_reported_not_raised(self):
        schema = make_schema({"x": ["a", "b", "c"]})
        cohort = Cohort(schema=schema, codes=[[0], [1], [1]])
        X = build_design_matrix(cohort, TermSet.parse(["x"]))
        assert X.column_labels == [INTERCEPT_LABEL, "x=b"]
        assert [X.candidate_columns[j] for j in X.empty] == [(Term.parse("x"), "c")]

    def test_interaction_columns_are_joint_non_reference_cells(self):
        schema = make_schema({"a": ["0", "1"], "b": ["p", "q", "r"]})
        codes = [[i, j] for i in range(2) for j in range(3)]
        cohort = Cohort(schema=schema, codes=codes)
        X = build_design_matrix(cohort, TermSet.parse(["a", "b", "a:b"]))
        assert X.column_labels[-2:] == ["a:b=1:q", "a:b=1:r"]
        np.testing.assert_array_equal(X.values[:, -1], [0, 0, 0, 0, 0, 1])

    def test_unknown_variable(self):
        cohort = Cohort(schema=make_schema({"x": ["0", "1"]}), codes=[[0]])
        with pytest.raises(SchemaError):
            build_design_matrix(cohort, TermSet.parse(["y"]))


def test_limited_pivot_keeps_earlier_columns():
    values = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [1.0, 1.0, 0.0]])
    # Column 2 equals column 0 minus column 1, so the last column goes.
    assert limited_pivot_rank(values) == [0, 1]


def test_joint_design_shares_columns():
    schema = make_schema({"x": ["a", "b", "c"]})
    np_cohort = Cohort(schema=schema, codes=[[0], [1], [2]])
    p_cohort = Cohort(schema=schema, codes=[[2], [1], [0]], design_weight=[2.0, 3.0, 4.0])
    joint = build_joint_design(np_cohort, p_cohort, TermSet.parse(["x"]))
    assert joint.np_block.column_map == joint.p_block.column_map
    assert joint.design.n_columns == 3
    np.testing.assert_array_equal(joint.np_block.values, [[1, 0, 0], [1, 1, 0], [1, 0, 1]])


def test_joint_design_drops_cells_absent_from_probability_cohort():
    schema = make_schema({"x": ["a", "b", "c"]})
    np_cohort = Cohort(schema=schema, codes=[[0], [1]])
    p_cohort = Cohort(schema=schema, codes=[[2], [0]], design_weight=[2.0, 3.0])
    joint = build_joint_design(np_cohort, p_cohort, TermSet.parse(["x"]))
    assert joint.design.column_labels == [INTERCEPT_LABEL, "x=c"]
    assert [joint.design.candidate_columns[j] for j in joint.design.empty] == [
        (Term.parse("x"), "b")
    ]
    # The NP-only level falls back to the reference cell.
    np.testing.assert_array_equal(joint.np_block.values, [[1, 0], [1, 0]])


def test_population_margins_cover_every_cell():
    schema = make_schema({"a": ["0", "1"], "b": ["0", "1"]})
    cohort = Cohort(schema=schema, codes=[[0, 0], [0, 1], [1, 1]])
    targets = population_margins(cohort, TermSet.parse(["a", "a:b"]), weights=[1.0, 2.0, 3.0])
    assert targets.population_size == 6.0
    assert targets.total(Term.parse("a"), {"a": "1"}) == 3.0
    assert targets.total(Term.parse("a:b"), {"a": "1", "b": "0"}) == 0.0
    assert len(targets.entries) == 6
