"""
Unit tests for the benchmark harness: catalog, configuration, runs,
summaries, artifacts and the report.

Run with: pytest tests/test_harness.py -v
"""
import json

import numpy as np
import pandas as pd
import pytest

from nutriscreen.const import (
    CALIBRATION_DIR,
    FAMILY_BOOSTING,
    FAMILY_DEEP,
    FAMILY_TRADITIONAL,
    LEADERBOARD_FILE,
    METRIC_NAMES,
    MODELS_DIR,
    REPORTS_DIR,
    RUN_FILE,
    TIMINGS_FILE,
)
from nutriscreen.data_model import split_stratified
from nutriscreen.errors import ConfigInvalid, InvalidHyperparameter, MissingArtifacts
from nutriscreen.harness import (
    DEFAULT_ROSTER,
    MODEL_CATALOG,
    BenchmarkConfig,
    ScaledModel,
    agreement_table,
    emit_report,
    family_summary,
    load_model,
    model_from_dict,
    performance_profile,
    run_benchmark,
    save_model,
    top_per_family,
    train_model,
    tune_params,
    write_run,
)
from nutriscreen.metrics_eval import evaluate

FAST_ROSTER = ("logistic_regression", "decision_tree", "lda")


def leaderboard_frame():
    rows = [
        ("xgboost", FAMILY_BOOSTING, 0.8, 0.7),
        ("adaboost", FAMILY_BOOSTING, 0.6, 0.5),
        ("lda", FAMILY_TRADITIONAL, 0.7, 0.6),
        ("knn", FAMILY_TRADITIONAL, 0.5, 0.5),
        ("dnn", FAMILY_DEEP, 0.4, 0.3),
    ]
    return pd.DataFrame(
        [
            {"model": m, "family": f, "status": "ok", **{name: v for name in METRIC_NAMES}, "cohens_kappa": k, "mcc": v}
            for m, f, v, k in rows
        ]
    )


# =============================================================================
# Catalog Tests
# =============================================================================

class TestCatalog:
    """Tests for the model catalog and artifact registry."""

    def test_roster_families(self):
        """The default roster covers all three families and 16 models."""
        assert len(DEFAULT_ROSTER) == 16
        assert {MODEL_CATALOG[name].family for name in DEFAULT_ROSTER} == {
            FAMILY_DEEP, FAMILY_BOOSTING, FAMILY_TRADITIONAL,
        }
        assert "svm_linear" in MODEL_CATALOG and "svm_linear" not in DEFAULT_ROSTER

    def test_scaled_models_wrap_standardizer(self, planted):
        """Scaled entries standardize on their own training data."""
        model = train_model("logistic_regression", planted)
        assert isinstance(model, ScaledModel)
        np.testing.assert_allclose(model.standardizer.mean, planted.features.mean(axis=0))
        assert not isinstance(train_model("lda", planted), ScaledModel)

    def test_unknown_model(self, planted):
        """Unknown catalog names are rejected."""
        with pytest.raises(InvalidHyperparameter):
            train_model("naive_bayes", planted)

    @pytest.mark.parametrize("name", ["logistic_regression", "decision_tree", "adaboost", "knn"])
    def test_save_load(self, planted, tmp_path, name):
        """Saved models reload with identical scores."""
        model = train_model(name, planted, params={"n_rounds": 5} if name == "adaboost" else None)
        path = save_model(model, tmp_path / "models" / f"{name}.json", name)
        assert json.loads(path.read_text())["name"] == name
        np.testing.assert_allclose(load_model(path).score(planted.features), model.score(planted.features))

    def test_unknown_kind(self):
        """Payloads of unknown kind are rejected."""
        with pytest.raises(InvalidHyperparameter):
            model_from_dict({"kind": "perceptron"})

    def test_tune_without_grid(self, planted):
        """Entries without a grid keep their parameters."""
        assert tune_params("lda", planted) == {}

    def test_tune_picks_grid_value(self, planted):
        """Tuning returns one of the grid values."""
        params = tune_params("knn", planted, seed=0)
        assert params["k"] in MODEL_CATALOG["knn"].grid["k"]


# =============================================================================
# Configuration Tests
# =============================================================================

class TestBenchmarkConfig:
    """Tests for config validation."""

    def test_defaults(self):
        """An empty mapping gives the defaults."""
        cfg = BenchmarkConfig.from_mapping({})
        assert cfg.roster == DEFAULT_ROSTER
        assert cfg.protocol == "holdout"
        assert cfg.train_ratio == 0.8

    @pytest.mark.parametrize(
        "data",
        [
            {"roster": ["perceptron"]},
            {"roster": ["lda", "lda"]},
            {"roster": []},
            {"train_ratio": 1.0},
            {"protocol": "bootstrap"},
            {"folds": 1},
            {"colour": "blue"},
        ],
    )
    def test_invalid(self, data):
        """Bad settings raise ConfigInvalid."""
        with pytest.raises(ConfigInvalid):
            BenchmarkConfig.from_mapping(data)

    def test_hash_is_stable(self):
        """Equal configs hash equally; different ones do not."""
        first = BenchmarkConfig.from_mapping({"roster": ["lda"], "seed": 1})
        second = BenchmarkConfig.from_mapping({"seed": 1, "roster": ["lda"]})
        third = BenchmarkConfig.from_mapping({"roster": ["lda"], "seed": 2})
        assert first.config_hash() == second.config_hash()
        assert first.config_hash() != third.config_hash()

    def test_from_file(self, tmp_path):
        """Configs load from JSON; unreadable files raise ConfigInvalid."""
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"roster": ["lda"], "protocol": "kfold", "folds": 3}))
        cfg = BenchmarkConfig.from_file(path)
        assert cfg.protocol == "kfold" and cfg.folds == 3
        path.write_text("{not json")
        with pytest.raises(ConfigInvalid):
            BenchmarkConfig.from_file(path)


# =============================================================================
# Benchmark Tests
# =============================================================================

class TestRunBenchmark:
    """Tests for holdout and k-fold runs."""

    def test_holdout(self, planted):
        """Every roster model is evaluated on the same test split."""
        cfg = BenchmarkConfig.from_mapping({"roster": list(FAST_ROSTER), "consensus": False, "seed": 3})
        result = run_benchmark(cfg, planted)
        lb = result.leaderboard
        assert set(lb["model"]) == set(FAST_ROSTER)
        assert (lb["status"] == "ok").all()
        assert (lb["n"] == result.split_sizes["test"]).all()
        assert result.split_sizes["train"] + result.split_sizes["test"] == planted.n_rows
        assert list(lb["f1"]) == sorted(lb["f1"], reverse=True)
        assert all(outcome.model is not None for outcome in result.outcomes.values())

    def test_failure_is_isolated(self, planted):
        """A failing model is reported last without stopping the run."""
        cfg = BenchmarkConfig.from_mapping(
            {"roster": ["knn", "lda"], "overrides": {"knn": {"k": 10_000}}, "consensus": False}
        )
        result = run_benchmark(cfg, planted)
        assert list(result.leaderboard["status"]) == ["ok", "failed"]
        assert "KLargerThanTrainingSet" in result.failures["knn"]
        assert np.isnan(result.leaderboard.iloc[1]["f1"])

    def test_single_model_matches_standalone(self, planted):
        """A one-model roster reports what a direct fit and evaluation gives."""
        cfg = BenchmarkConfig.from_mapping({"roster": ["decision_tree"], "consensus": False, "seed": 8})
        result = run_benchmark(cfg, planted)
        train, test = split_stratified(planted, cfg.train_ratio, cfg.seed).apply(planted)
        model = train_model("decision_tree", train, cfg.seed)
        expected = evaluate(test.labels, model.score(test.features))
        assert result.reports["decision_tree"].metrics == expected

    def test_kfold_pools_scores(self, planted):
        """K-fold evaluates out-of-fold scores over every row."""
        cfg = BenchmarkConfig.from_mapping({"roster": ["lda"], "protocol": "kfold", "folds": 4, "consensus": False})
        result = run_benchmark(cfg, planted)
        assert result.reports["lda"].n == planted.n_rows
        assert result.reports["lda"].split == "cv"
        assert sum(result.split_sizes.values()) == planted.n_rows
        assert result.outcomes["lda"].model is None

    def test_feature_subset(self, planted):
        """Configured features restrict the dataset."""
        cfg = BenchmarkConfig.from_mapping(
            {"roster": ["lda"], "features": ["informative_0", "noise_0"], "consensus": False}
        )
        result = run_benchmark(cfg, planted)
        assert list(result.pca.columns) == ["pc1", "pc2", "label"]

    def test_deterministic(self, planted):
        """The same seed gives the same leaderboard."""
        cfg = BenchmarkConfig.from_mapping({"roster": list(FAST_ROSTER), "consensus": False, "seed": 5})
        first = run_benchmark(cfg, planted).leaderboard
        second = run_benchmark(cfg, planted).leaderboard
        pd.testing.assert_frame_equal(first, second)


# =============================================================================
# Summary Tests
# =============================================================================

class TestSummaries:
    """Tests for family statistics and agreement tables."""

    def test_family_summary_quartiles(self):
        """Quartiles use linear interpolation within each family."""
        summary = family_summary(leaderboard_frame())
        boosting = summary[(summary["family"] == FAMILY_BOOSTING) & (summary["metric"] == "f1")].iloc[0]
        assert boosting["n"] == 2
        assert boosting["min"] == pytest.approx(0.6)
        assert boosting["q1"] == pytest.approx(0.65)
        assert boosting["median"] == pytest.approx(0.7)
        assert boosting["max"] == pytest.approx(0.8)

    def test_family_summary_shape(self):
        """Three families and four metrics give twelve rows."""
        assert len(family_summary(leaderboard_frame())) == 12

    def test_family_summary_skips_failures(self):
        """Failed rows do not enter the statistics."""
        lb = leaderboard_frame()
        lb.loc[lb["model"] == "knn", "status"] = "failed"
        summary = family_summary(lb)
        traditional = summary[(summary["family"] == FAMILY_TRADITIONAL) & (summary["metric"] == "accuracy")]
        assert traditional.iloc[0]["n"] == 1

    def test_agreement_gap(self):
        """The gap is |kappa - mcc|."""
        table = agreement_table(leaderboard_frame())
        np.testing.assert_allclose(table["kappa_mcc_gap"], [0.1, 0.1, 0.1, 0.0, 0.1])

    def test_profile_and_top(self):
        """Profiles average per family; the first row of a family is its best."""
        lb = leaderboard_frame()
        profile = performance_profile(lb)
        assert profile.set_index("family").loc[FAMILY_BOOSTING, "f1"] == pytest.approx(0.7)
        assert top_per_family(lb) == {
            FAMILY_DEEP: "dnn", FAMILY_BOOSTING: "xgboost", FAMILY_TRADITIONAL: "lda",
        }


# =============================================================================
# Artifact Tests
# =============================================================================

class TestArtifacts:
    """Tests for run directories and the markdown report."""

    @pytest.fixture
    def run_dir(self, planted, tmp_path):
        cfg = BenchmarkConfig.from_mapping(
            {"roster": ["lda", "decision_tree", "knn"], "overrides": {"knn": {"k": 10_000}}}
        )
        return write_run(run_benchmark(cfg, planted), tmp_path / "run")

    def test_layout(self, run_dir):
        """Tables, per-model reports, calibration bins and models are written."""
        for name in (LEADERBOARD_FILE, TIMINGS_FILE, RUN_FILE, "consensus_importance.csv", "pca_projection.csv"):
            assert (run_dir / name).exists(), name
        assert (run_dir / REPORTS_DIR / "lda.json").exists()
        assert (run_dir / CALIBRATION_DIR / "decision_tree.csv").exists()
        assert (run_dir / MODELS_DIR / "lda.json").exists()
        assert not (run_dir / MODELS_DIR / "knn.json").exists()

    def test_run_metadata(self, run_dir):
        """run.json records seed, hash, fingerprint and failures."""
        run = json.loads((run_dir / RUN_FILE).read_text())
        assert run["seed"] == 42
        assert len(run["config_hash"]) == 64
        assert len(run["dataset_fingerprint"]) == 64
        assert set(run["failures"]) == {"knn"}
        assert len(run["pca_explained_ratio"]) == 2

    def test_report(self, run_dir):
        """The report carries every section and lists the failure."""
        text = emit_report(run_dir).read_text()
        for heading in (
            "## Provenance",
            "## Leaderboard",
            "## Family summary",
            "## Performance profile",
            "## Agreement and precision-recall trade-off",
            "## Calibration",
            "## Consensus feature importance",
            "## Separability (PCA)",
            "## Failures",
        ):
            assert heading in text
        assert "- knn: KLargerThanTrainingSet" in text

    def test_report_needs_artifacts(self, tmp_path):
        """An empty directory cannot be reported."""
        with pytest.raises(MissingArtifacts):
            emit_report(tmp_path)

    def test_report_needs_calibration(self, run_dir):
        """A missing calibration table of a family winner raises."""
        for path in (run_dir / CALIBRATION_DIR).iterdir():
            path.unlink()
        with pytest.raises(MissingArtifacts):
            emit_report(run_dir)
