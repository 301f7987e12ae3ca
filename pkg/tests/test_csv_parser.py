import numpy as np
import pytest

from models import ParseError, SchemaError, Term, TermSet, make_schema
from utils.csv_exporter import generate_margins_csv, generate_weights_csv
from utils.csv_parser import (
    covariate_columns,
    parse_cohort,
    parse_margins,
    parse_weights,
    read_table,
)

COHORT = """sex,age,_weight,_id
F,young,10,r1
M,old,20,r2
F,old,30,r3
"""

MARGINS = """term,cell,total
__N__,,100
sex,F,60
sex,M,40
age:sex,young:F,25
age:sex,old:F,35
age:sex,young:M,10
age:sex,old:M,30
"""


class TestReadTable:
    def test_semicolon_dialect(self):
        table = read_table("a;b\n1;2\n3;4\n")
        assert table.header == ["a", "b"]
        assert table.column("b") == ["2", "4"]

    def test_line_numbers_skip_blank_lines(self):
        table = read_table("a,b\n\n1,2\n")
        assert table.rows[0][0] == 3

    def test_field_count_mismatch_reports_line(self):
        with pytest.raises(ParseError) as info:
            read_table("a,b\n1,2\n3\n")
        assert info.value.line == 3

    def test_empty_file(self):
        with pytest.raises(ParseError):
            read_table("")


class TestParseCohort:
    def test_inferred_schema_sorts_levels(self):
        cohort = parse_cohort(COHORT)
        assert cohort.schema == (("sex", ("F", "M")), ("age", ("old", "young")))
        np.testing.assert_array_equal(cohort.design_weight, [10.0, 20.0, 30.0])
        assert cohort.ids == ("r1", "r2", "r3")

    def test_declared_schema_keeps_unobserved_levels(self):
        schema = make_schema({"sex": ["F", "M", "X"], "age": ["young", "old"]})
        cohort = parse_cohort(COHORT, schema)
        assert cohort.levels("sex") == ("F", "M", "X")
        np.testing.assert_array_equal(cohort.column("age"), [0, 1, 1])

    def test_undeclared_level_reports_line(self):
        schema = make_schema({"sex": ["F"], "age": ["young", "old"]})
        with pytest.raises(ParseError) as info:
            parse_cohort(COHORT, schema)
        assert info.value.line == 3

    def test_missing_weight_column(self):
        with pytest.raises(SchemaError):
            parse_cohort("sex\nF\n", require_weight=True)

    def test_non_positive_weight(self):
        with pytest.raises(ParseError):
            parse_cohort("sex,_weight\nF,0\n")

    def test_outcome_must_be_binary(self):
        with pytest.raises(ParseError, match="0 or 1"):
            parse_cohort("sex,_outcome\nF,2\n")

    def test_missing_value(self):
        with pytest.raises(ParseError) as info:
            parse_cohort("sex,age\nF,\n")
        assert info.value.line == 2

    def test_reserved_columns_are_not_covariates(self):
        assert covariate_columns(read_table(COHORT)) == ["sex", "age"]


class TestParseMargins:
    def test_population_size_and_cells(self):
        targets = parse_margins(MARGINS)
        assert targets.population_size == 100.0
        assert targets.total(Term.parse("sex:age"), {"sex": "M", "age": "old"}) == 30.0
        assert targets.terms().labels() == ["sex", "age:sex"]

    def test_population_size_required(self):
        with pytest.raises(ParseError, match="__N__"):
            parse_margins("term,cell,total\nsex,F,60\nsex,M,40\n")

    def test_duplicate_cell_names_first_line(self):
        content = MARGINS + "sex:age,F:young,25\n"
        with pytest.raises(ParseError, match="repeats line 5") as info:
            parse_margins(content)
        assert info.value.line == 9

    def test_cells_must_sum_to_population(self):
        with pytest.raises(SchemaError, match="sum to"):
            parse_margins("term,cell,total\n__N__,,100\nsex,F,60\nsex,M,30\n")

    def test_cell_arity(self):
        with pytest.raises(ParseError):
            parse_margins("term,cell,total\n__N__,,100\nage:sex,young,100\n")

    def test_missing_column(self):
        with pytest.raises(ParseError):
            parse_margins("term,total\n__N__,100\n")

    def test_written_margins_read_back(self):
        targets = parse_margins(MARGINS)
        schema = make_schema({"sex": ["F", "M"], "age": ["young", "old"]})
        again = parse_margins(generate_margins_csv(targets, schema))
        assert again.population_size == targets.population_size
        for term in TermSet.parse(["sex", "age:sex"]):
            for sex in ("F", "M"):
                for age in ("young", "old"):
                    levels = {"sex": sex, "age": age}
                    assert again.total(term, levels) == targets.total(term, levels)


def test_weights_file_read_back_exactly():
    base = np.array([1.0 / 3.0, 2.5])
    final = np.array([np.pi, 1e-17])
    weights = parse_weights(generate_weights_csv(["a", "b"], base, final))
    assert weights.ids == ["a", "b"]
    np.testing.assert_array_equal(weights.base_weight, base)
    np.testing.assert_array_equal(weights.final_weight, final)


def test_weights_file_needs_columns():
    with pytest.raises(ParseError):
        parse_weights("id,weight\na,1\n")
