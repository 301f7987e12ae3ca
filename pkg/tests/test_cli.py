import json
from pathlib import Path

import numpy as np
import pytest
from conftest import ABC_SCHEMA, MAINS
from typer.testing import CliRunner

from main import app
from models import TermSet
from utils.csv_exporter import generate_margins_csv, generate_weights_csv
from utils.estimation import estimate_prevalence
from utils.selection import rails_fit

runner = CliRunner()


def write_cohort(path: Path, cohort, weights=None):
    names = [name for name, _ in cohort.schema]
    lines = [",".join(names + (["_weight"] if weights is not None else []))]
    for i, codes in enumerate(cohort.codes):
        values = [cohort.schema[j][1][code] for j, code in enumerate(codes)]
        if weights is not None:
            values.append(repr(float(weights[i])))
        lines.append(",".join(values))
    path.write_text("\n".join(lines) + "\n")


@pytest.fixture
def fit_inputs(tmp_path: Path, structural_zero_cohorts):
    """Cohort, margin and config files; returns a function writing a config with overrides."""
    np_cohort, p_cohort, targets = structural_zero_cohorts
    write_cohort(tmp_path / "np.csv", np_cohort)
    write_cohort(tmp_path / "p.csv", p_cohort, p_cohort.design_weight)
    (tmp_path / "margins.csv").write_text(generate_margins_csv(targets, ABC_SCHEMA))

    def config(**changes) -> Path:
        data = {
            "np_cohort_path": "np.csv",
            "p_cohort_path": "p.csv",
            "margins_path": "margins.csv",
            "main_terms": ["a", "b", "c"],
            "candidate_pool": [],
            "out": str(tmp_path / "out"),
        }
        data.update(changes)
        path = tmp_path / "config.json"
        path.write_text(json.dumps(data))
        return path

    return config


class TestFit:
    def test_main_effects_only(self, fit_inputs, tmp_path: Path):
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs())])
        assert result.exit_code == 0, result.output
        assert "Weighting run: converged" in result.output
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["constraints"]["max_relative_residual"] <= 1e-6
        weights = (tmp_path / "out" / "weights.csv").read_text().splitlines()
        assert weights[0] == "id,base_weight,final_weight"
        assert len(weights) == 1 + 600

    def test_structural_zero_interaction_is_pruned(self, fit_inputs, tmp_path: Path):
        config = fit_inputs(candidate_pool=["a:b", "a:c", "b:c"])
        result = runner.invoke(app, ["fit", "--config", str(config)])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["removed_by_lifo"] == ["a:b"]
        assert "Removed by LIFO: a:b" in result.output

    def test_non_convergence_exit_code(self, fit_inputs):
        config = fit_inputs(candidate_pool=["a:b"], selection={"lifo": False})
        result = runner.invoke(app, ["fit", "--config", str(config)])
        assert result.exit_code == 2
        assert "NOT CONVERGED" in result.output

    def test_margins_outside_fitted_terms_are_ignored(self, fit_inputs, tmp_path: Path):
        margins = tmp_path / "margins.csv"
        margins.write_text(margins.read_text() + "region,north,7000\n")
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs())])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert "region" not in report["schema"]
        assert {r["term"] for r in report["constraints"]["residuals"]} == {"a", "b", "c"}

    def test_undeclared_margin_level(self, fit_inputs, tmp_path: Path):
        margins = tmp_path / "margins.csv"
        margins.write_text(margins.read_text().replace("\nc,1,", "\nc,7,"))
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs())])
        assert result.exit_code == 1
        assert "'7'" in result.output

    def test_inferred_schema_is_the_union_of_levels(self, fit_inputs, tmp_path: Path):
        p = tmp_path / "p.csv"
        p.write_text(p.read_text() + "0,0,2,1000.0\n")
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs())])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["schema"]["c"] == ["0", "1", "2"]

    def test_declared_schema_rejects_other_levels(self, fit_inputs, tmp_path: Path):
        p = tmp_path / "p.csv"
        p.write_text(p.read_text() + "0,0,2,1000.0\n")
        schema = {"a": ["0", "1"], "b": ["0", "1"], "c": ["0", "1"]}
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs(schema=schema))])
        assert result.exit_code == 1
        assert "Level '2' is not declared" in result.output

    def test_invalid_override(self, fit_inputs):
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs()), "--alpha", "2"])
        assert result.exit_code == 1

    def test_max_order_generates_pool(self, fit_inputs, tmp_path: Path):
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs()), "--max-order", "2"])
        assert result.exit_code == 0, result.output
        report = json.loads((tmp_path / "out" / "report.json").read_text())
        assert report["candidate_pool"] == ["a:b", "a:c", "b:c"]


SMALL_SCENARIO = {
    "name": "S1",
    "alpha": [-1.0, 0.3, 0.5, 0.2, 0.4, 0.6, 0, 0, 0, 0, 0, 0],
    "beta": [-4.0, 0.25, 0.5, 0.3, 0.5, 0.7, 0.3, 0.25, 0.2, 0.4, 0.6, 0.5],
    "gamma": [-6.0, 0.1, -0.2, 0.1, 0.2, 0.3, 0, 0, 0, 0, 0, 0],
    "population_size": 10000,
    "np_size": 1000,
    "p_size": 300,
}


class TestSimulate:
    def test_reruns_are_byte_identical(self, tmp_path: Path):
        scenario = tmp_path / "small.json"
        scenario.write_text(json.dumps(SMALL_SCENARIO))
        outputs = []
        for name in ("first", "second"):
            out = tmp_path / name
            args = ["simulate", str(scenario), "--reps", "2", "--seed", "7", "--out", str(out)]
            for estimator in ("naive", "oracle", "cal-1"):
                args += ["--estimator", estimator]
            result = runner.invoke(app, args)
            assert result.exit_code == 0, result.output
            files = ("replications.csv", "metrics.csv", "summary.txt")
            outputs.append({f: (out / f).read_bytes() for f in files})
        assert outputs[0] == outputs[1]
        metrics = outputs[0]["metrics.csv"].decode().splitlines()
        assert metrics[0].startswith("scenario,estimator,replications")
        assert len(metrics) == 4

    def test_unknown_scenario(self, tmp_path: Path):
        result = runner.invoke(app, ["simulate", "S9", "--out", str(tmp_path)])
        assert result.exit_code == 1
        assert "S9" in result.output

    def test_unknown_scale(self, tmp_path: Path):
        result = runner.invoke(app, ["simulate", "S1", "--scale", "huge", "--out", str(tmp_path)])
        assert result.exit_code == 1


class TestEstimate:
    def write(self, tmp_path: Path, cohort: str, ids, final):
        (tmp_path / "cohort.csv").write_text(cohort)
        (tmp_path / "weights.csv").write_text(generate_weights_csv(ids, final, final))
        weights, cohort_path = tmp_path / "weights.csv", tmp_path / "cohort.csv"
        return ["estimate", "-w", str(weights), "--cohort", str(cohort_path)]

    def test_toy_prevalence(self, tmp_path: Path):
        args = self.write(tmp_path, "_id,_outcome\n0,1\n1,0\n", ["0", "1"], [1.0, 3.0])
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        assert "Prevalence of _outcome: 0.25" in result.output

    def test_constant_outcome(self, tmp_path: Path):
        args = self.write(tmp_path, "_id,_outcome\na,1\nb,1\n", ["a", "b"], [2.0, 5.0])
        result = runner.invoke(app, args)
        assert "Prevalence of _outcome: 1\n" in result.output
        assert "Standard error: 0\n" in result.output

    def test_unmatched_ids(self, tmp_path: Path):
        args = self.write(tmp_path, "_id,_outcome\na,1\nc,1\n", ["a", "b"], [2.0, 5.0])
        result = runner.invoke(app, args)
        assert result.exit_code == 1
        assert "['c']" in result.output

    def test_double_weighting(self, tmp_path: Path):
        rows = ["_id,g,complete,_outcome"]
        for i in range(10):
            rows.append(f"a{i},a,{int(i < 8)},{int(i < 4)}")
        for i in range(10):
            rows.append(f"b{i},b,{int(i < 4)},{int(i < 4)}")
        ids = [row.split(",")[0] for row in rows[1:]]
        args = self.write(tmp_path, "\n".join(rows) + "\n", ids, [1.0] * 20)
        args += ["--complete", "complete", "--out", str(tmp_path / "out")]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output
        assert "Prevalence of _outcome: 0.75" in result.output
        assert "Double weighting: 12 of 20 rows complete" in result.output
        saved = json.loads((tmp_path / "out" / "estimate.json").read_text())
        assert saved["estimate"]["estimate"] == pytest.approx(0.75, rel=1e-6)

    def test_fit_then_estimate_reproduces_in_memory_prevalence(
        self, fit_inputs, structural_zero_cohorts, tmp_path: Path
    ):
        np_cohort, p_cohort, targets = structural_zero_cohorts
        result = runner.invoke(app, ["fit", "--config", str(fit_inputs())])
        assert result.exit_code == 0, result.output

        y = (np.arange(np_cohort.n_rows) % 3 == 0).astype(float)
        rows = ["_id,_outcome"] + [f"{i},{int(v)}" for i, v in enumerate(y)]
        (tmp_path / "outcome.csv").write_text("\n".join(rows) + "\n")
        args = [
            "estimate", "-w", str(tmp_path / "out" / "weights.csv"),
            "--cohort", str(tmp_path / "outcome.csv"), "--out", str(tmp_path / "est"),
        ]
        result = runner.invoke(app, args)
        assert result.exit_code == 0, result.output

        fitted = rails_fit(np_cohort, p_cohort, targets, MAINS, TermSet())
        expected = estimate_prevalence(fitted.weights, y)
        saved = json.loads((tmp_path / "est" / "estimate.json").read_text())["estimate"]
        assert saved["estimate"] == pytest.approx(expected.estimate, rel=1e-12)
        assert saved["variance"] == pytest.approx(expected.variance, rel=1e-12)
