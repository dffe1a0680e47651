"""
End-to-end tests for the command line entry point.

Run with: pytest tests/test_cli.py -v
"""
import json

import pandas as pd
import pytest

from nutriscreen.cli import build_parser, main
from nutriscreen.const import LEADERBOARD_FILE, REPORT_FILE, RUN_FILE
from nutriscreen.errors import ExitCode


@pytest.fixture
def dataset_csv(planted, tmp_path):
    return planted.to_csv(tmp_path / "data" / "dataset.csv")


class TestParser:
    """Tests for argument parsing."""

    def test_requires_command(self):
        """A subcommand is mandatory."""
        with pytest.raises(SystemExit):
            build_parser().parse_args([])

    def test_unknown_model(self, dataset_csv):
        """train only accepts catalog names."""
        with pytest.raises(SystemExit):
            main(["train", "--dataset", str(dataset_csv), "--model", "perceptron"])

    def test_verbosity_exclusive(self):
        """-v and -q cannot be combined."""
        with pytest.raises(SystemExit):
            build_parser().parse_args(["-v", "-q", "report"])

    def test_list_options(self):
        """Comma-separated options become lists."""
        args = build_parser().parse_args(["benchmark", "--dataset", "d.csv", "--roster", "lda, knn"])
        assert args.roster == ["lda", "knn"]


class TestPrepareAndSynth:
    """Tests for the data commands."""

    def test_prepare_fixture(self, survey_csv, tmp_path, capsys):
        """The raw extract encodes into a dataset and a province table."""
        out = tmp_path / "dataset.csv"
        assert main(["prepare", "--input", str(survey_csv), "--out", str(out)]) == ExitCode.SUCCESS
        frame = pd.read_csv(out)
        assert "malnutrition" in frame.columns
        assert (tmp_path / "dataset.json").exists()
        assert (tmp_path / "province_prevalence.csv").exists()
        assert "Malnourished" in capsys.readouterr().out

    def test_synth_then_prepare(self, tmp_path):
        """Synthetic tables go through prepare unchanged."""
        raw = tmp_path / "synth.csv"
        assert main(["--seed", "3", "synth", "--n", "300", "--out", str(raw)]) == ExitCode.SUCCESS
        assert len(pd.read_csv(raw)) == 300
        out = tmp_path / "encoded.csv"
        assert main(["prepare", "--input", str(raw), "--out", str(out)]) == ExitCode.SUCCESS
        assert len(pd.read_csv(out)) == 300

    def test_synth_is_seeded(self, tmp_path):
        """The same seed writes the same file."""
        first, second = tmp_path / "a.csv", tmp_path / "b.csv"
        main(["--seed", "9", "synth", "--n", "50", "--out", str(first)])
        main(["--seed", "9", "synth", "--n", "50", "--out", str(second)])
        assert first.read_text() == second.read_text()

    def test_missing_input(self, tmp_path):
        """A missing input file is a validation error."""
        assert main(["prepare", "--input", str(tmp_path / "absent.csv")]) == ExitCode.VALIDATION_ERROR


class TestModelCommands:
    """Tests for select, train and evaluate."""

    def test_select(self, dataset_csv, tmp_path):
        """select writes the ensemble result with a selected list."""
        out = tmp_path / "features.json"
        code = main([
            "select", "--dataset", str(dataset_csv), "--methods", "mutual_info,pearson",
            "--boruta-iters", "20", "--overrides", "", "--out", str(out),
        ])
        assert code == ExitCode.SUCCESS
        payload = json.loads(out.read_text())
        assert {"informative_0", "informative_1"} <= set(payload["selected"])

    def test_train_and_evaluate(self, dataset_csv, tmp_path):
        """A trained model evaluates with a report and calibration table."""
        model_file = tmp_path / "lr.json"
        features = tmp_path / "keep.json"
        features.write_text(json.dumps(["informative_0", "informative_1"]))
        assert main([
            "train", "--dataset", str(dataset_csv), "--model", "logistic_regression",
            "--features", str(features), "--params", '{"l2": 0.5}', "--out", str(model_file),
        ]) == ExitCode.SUCCESS
        report = tmp_path / "lr_report.json"
        assert main([
            "evaluate", "--dataset", str(dataset_csv), "--model-file", str(model_file),
            "--features", str(features), "--out", str(report),
        ]) == ExitCode.SUCCESS
        payload = json.loads(report.read_text())
        assert payload["model"] == "lr"
        assert 0.5 < payload["metrics"]["roc_auc"] <= 1.0
        assert (tmp_path / "lr_calibration.csv").exists()

    def test_evaluate_width_mismatch(self, dataset_csv, tmp_path):
        """Scoring with the wrong column count is a validation error."""
        model_file = tmp_path / "lda.json"
        features = tmp_path / "keep.json"
        features.write_text(json.dumps(["informative_0"]))
        main(["train", "--dataset", str(dataset_csv), "--model", "lda", "--features", str(features),
              "--out", str(model_file)])
        code = main(["evaluate", "--dataset", str(dataset_csv), "--model-file", str(model_file)])
        assert code == ExitCode.VALIDATION_ERROR


class TestBenchmarkCommands:
    """Tests for benchmark and report."""

    def test_benchmark_and_report(self, dataset_csv, tmp_path):
        """A benchmark run writes its directory and report."""
        run_dir = tmp_path / "run"
        code = main([
            "--out-dir", str(run_dir), "benchmark", "--dataset", str(dataset_csv),
            "--roster", "lda,decision_tree", "--no-consensus",
        ])
        assert code == ExitCode.SUCCESS
        assert (run_dir / LEADERBOARD_FILE).exists()
        assert (run_dir / REPORT_FILE).exists()
        (run_dir / REPORT_FILE).unlink()
        assert main(["report", "--run-dir", str(run_dir)]) == ExitCode.SUCCESS
        assert (run_dir / REPORT_FILE).exists()

    def test_partial_failure(self, dataset_csv, tmp_path):
        """Failed models give the partial-failure exit code."""
        config = tmp_path / "bench.json"
        config.write_text(json.dumps({
            "roster": ["lda", "knn"],
            "overrides": {"knn": {"k": 10000}},
            "consensus": False,
            "out_dir": str(tmp_path / "run"),
        }))
        code = main(["--config", str(config), "--seed", "11", "benchmark", "--dataset", str(dataset_csv)])
        assert code == ExitCode.PARTIAL_FAILURE
        run = json.loads((tmp_path / "run" / RUN_FILE).read_text())
        assert run["seed"] == 11
        assert "knn" in run["failures"]

    def test_bad_config(self, dataset_csv, tmp_path):
        """Invalid configs are validation errors."""
        config = tmp_path / "bench.json"
        config.write_text(json.dumps({"roster": ["perceptron"]}))
        code = main(["--config", str(config), "benchmark", "--dataset", str(dataset_csv)])
        assert code == ExitCode.VALIDATION_ERROR
        code = main(["--config", str(tmp_path / "absent.json"), "benchmark", "--dataset", str(dataset_csv)])
        assert code == ExitCode.VALIDATION_ERROR

    def test_report_missing_run(self, tmp_path):
        """Reporting an empty directory is a validation error."""
        assert main(["report", "--run-dir", str(tmp_path)]) == ExitCode.VALIDATION_ERROR

    def test_report_needs_directory(self):
        """report without a directory is a validation error."""
        assert main(["report"]) == ExitCode.VALIDATION_ERROR
