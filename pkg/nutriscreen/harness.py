"""
Benchmark harness: model catalog, configuration, training/evaluation runs,
leaderboard summaries, run artifacts and the markdown report.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from collections.abc import Callable, Mapping, Sequence
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime
from pathlib import Path
from typing import Any, ClassVar

import numpy as np
import pandas as pd
import voluptuous as vol
from joblib import Parallel, delayed

from .autodiff_nn import NnModel, NnSpec, TabNetLiteSpec, fit_nn
from .const import (
    AGREEMENT_FILE,
    CALIBRATION_DIR,
    CONSENSUS_FILE,
    DEFAULT_FOLDS,
    DEFAULT_SEED,
    DEFAULT_TRAIN_RATIO,
    FAMILIES,
    FAMILY_BOOSTING,
    FAMILY_DEEP,
    FAMILY_SUMMARY_FILE,
    FAMILY_TRADITIONAL,
    LEADERBOARD_FILE,
    METRIC_NAMES,
    MODELS_DIR,
    PCA_FILE,
    PROFILE_FILE,
    PROFILE_METRICS,
    REPORT_FILE,
    REPORTS_DIR,
    RUN_FILE,
    SUMMARY_METRICS,
    TIMINGS_FILE,
)
from .data_model import Dataset, TrainedModel, kfold_stratified, split_stratified
from .errors import ConfigInvalid, InvalidHyperparameter, MissingArtifacts
from .metrics_eval import (
    EvalReport,
    calibration_curve,
    consensus_importance,
    evaluate,
    pca_project,
)
from .models_boosting import AdaBoostModel, BoostedModel, fit_adaboost, fit_gbdt, preset
from .models_classic import (
    ForestModel,
    KnnModel,
    LdaModel,
    LinearModel,
    SvmModel,
    TreeModel,
    fit_forest,
    fit_knn,
    fit_lda,
    fit_logreg,
    fit_svm,
    fit_tree,
)
from .preprocess import Standardizer, fit_standardizer

_LOGGER = logging.getLogger(__name__)

TUNING_FOLDS = 3


# =============================================================================
# Scaled models and the artifact registry
# =============================================================================

@dataclass(eq=False)
class ScaledModel(TrainedModel):
    """A model trained on standardized features, bundled with its statistics."""
    kind: ClassVar[str] = "scaled"
    standardizer: Standardizer
    inner: TrainedModel

    @property
    def n_features(self) -> int:
        return self.standardizer.mean.shape[0]

    def score(self, features: np.ndarray) -> np.ndarray:
        return self.inner.score(self.standardizer.transform(self._check_width(features)))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "standardizer": self.standardizer.to_dict(), "inner": self.inner.to_dict()}

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> ScaledModel:
        return cls(
            standardizer=Standardizer.from_dict(payload["standardizer"]),
            inner=model_from_dict(payload["inner"]),
        )


MODEL_TYPES: dict[str, type[TrainedModel]] = {
    cls.kind: cls
    for cls in (
        LinearModel,
        LdaModel,
        KnnModel,
        TreeModel,
        ForestModel,
        SvmModel,
        AdaBoostModel,
        BoostedModel,
        NnModel,
        ScaledModel,
    )
}


def model_from_dict(payload: Mapping[str, Any]) -> TrainedModel:
    try:
        model_type = MODEL_TYPES[payload["kind"]]
    except KeyError as err:
        raise InvalidHyperparameter(f"unknown model kind {payload.get('kind')!r}") from err
    return model_type.from_dict(dict(payload))


def save_model(model: TrainedModel, path: Path | str, name: str | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"name": name, "model": model.to_dict()}
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    _LOGGER.debug("Saved %s model to %s", model.kind, path)
    return path


def load_model(path: Path | str) -> TrainedModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return model_from_dict(payload["model"] if "model" in payload else payload)


# =============================================================================
# Model catalog
# =============================================================================

FitFunction = Callable[[Dataset, int, dict[str, Any]], TrainedModel]


@dataclass(frozen=True)
class ModelEntry:
    """A named configuration of one learner."""
    name: str
    family: str
    fit: FitFunction
    scaled: bool = False
    grid: Mapping[str, Sequence[Any]] = field(default_factory=dict)


def _gbdt(preset_name: str) -> FitFunction:
    def fit(ds: Dataset, seed: int, params: dict[str, Any]) -> TrainedModel:
        return fit_gbdt(ds, preset(preset_name, **params), seed=seed)
    return fit


_NN_SPEC_FIELDS = {f.name for f in fields(NnSpec)} - {"tabnet"}
_TABNET_FIELDS = {f.name for f in fields(TabNetLiteSpec)}


def _nn(arch: str) -> FitFunction:
    def fit(ds: Dataset, seed: int, params: dict[str, Any]) -> TrainedModel:
        spec_args = {k: v for k, v in params.items() if k in _NN_SPEC_FIELDS}
        tabnet_args = {k: v for k, v in params.items() if k in _TABNET_FIELDS}
        train_args = {k: v for k, v in params.items() if k not in _NN_SPEC_FIELDS | _TABNET_FIELDS}
        spec = NnSpec(**spec_args, tabnet=TabNetLiteSpec(**tabnet_args))
        return fit_nn(ds, arch=arch, spec=spec, seed=seed, **train_args)
    return fit


MODEL_CATALOG: dict[str, ModelEntry] = {
    entry.name: entry
    for entry in (
        ModelEntry("dnn", FAMILY_DEEP, _nn("dnn"), scaled=True),
        ModelEntry("wide_deep", FAMILY_DEEP, _nn("wide_deep"), scaled=True),
        ModelEntry("resnet", FAMILY_DEEP, _nn("resnet_mlp"), scaled=True),
        ModelEntry("tabnet", FAMILY_DEEP, _nn("tabnet_lite"), scaled=True, grid={"sparsity": (1e-4, 1e-3, 1e-2)}),
        ModelEntry(
            "adaboost", FAMILY_BOOSTING,
            lambda ds, seed, p: fit_adaboost(ds, seed=seed, **p),
            grid={"n_rounds": (50, 100, 200)},
        ),
        ModelEntry("catboost", FAMILY_BOOSTING, _gbdt("catboost"), grid={"learning_rate": (0.05, 0.1)}),
        ModelEntry("xgboost", FAMILY_BOOSTING, _gbdt("xgboost"), grid={"learning_rate": (0.05, 0.1)}),
        ModelEntry("lightgbm", FAMILY_BOOSTING, _gbdt("lightgbm"), grid={"learning_rate": (0.05, 0.1)}),
        ModelEntry("histgb", FAMILY_BOOSTING, _gbdt("histgb"), grid={"learning_rate": (0.05, 0.1)}),
        ModelEntry(
            "svm", FAMILY_TRADITIONAL,
            lambda ds, seed, p: fit_svm(ds, kernel="rbf_rff", seed=seed, **p),
            scaled=True, grid={"C": (0.1, 1.0, 10.0)},
        ),
        ModelEntry("lda", FAMILY_TRADITIONAL, lambda ds, seed, p: fit_lda(ds, **p)),
        ModelEntry(
            "random_forest", FAMILY_TRADITIONAL,
            lambda ds, seed, p: fit_forest(ds, seed=seed, **p),
            grid={"max_depth": (None, 8)},
        ),
        ModelEntry(
            "extra_trees", FAMILY_TRADITIONAL,
            lambda ds, seed, p: fit_forest(ds, bootstrap=False, random_splits=True, seed=seed, **p),
            grid={"max_depth": (None, 8)},
        ),
        ModelEntry(
            "decision_tree", FAMILY_TRADITIONAL,
            lambda ds, seed, p: fit_tree(ds, seed=seed, **p),
            grid={"max_depth": (4, 8, None)},
        ),
        ModelEntry(
            "knn", FAMILY_TRADITIONAL,
            lambda ds, seed, p: fit_knn(ds, **p),
            scaled=True, grid={"k": (5, 15, 31)},
        ),
        ModelEntry(
            "logistic_regression", FAMILY_TRADITIONAL,
            lambda ds, seed, p: fit_logreg(ds, **p),
            scaled=True, grid={"l2": (0.1, 1.0, 10.0)},
        ),
        ModelEntry(
            "svm_linear", FAMILY_TRADITIONAL,
            lambda ds, seed, p: fit_svm(ds, kernel="linear", seed=seed, **p),
            scaled=True, grid={"C": (0.1, 1.0, 10.0)},
        ),
    )
}

DEFAULT_ROSTER: tuple[str, ...] = tuple(name for name in MODEL_CATALOG if name != "svm_linear")


def train_model(
    name: str, ds: Dataset, seed: int = DEFAULT_SEED, params: Mapping[str, Any] | None = None
) -> TrainedModel:
    """Fit one catalog entry; scaled entries standardize on this training set."""
    try:
        entry = MODEL_CATALOG[name]
    except KeyError:
        raise InvalidHyperparameter(f"unknown model {name!r}") from None
    params = dict(params or {})
    if not entry.scaled:
        return entry.fit(ds, seed, params)
    stats = fit_standardizer(ds.features)
    inner = entry.fit(ds.with_features(stats.transform(ds.features)), seed, params)
    return ScaledModel(standardizer=stats, inner=inner)


def tune_params(name: str, ds: Dataset, seed: int = DEFAULT_SEED, base: Mapping[str, Any] | None = None) -> dict[str, Any]:
    """
    Pick the entry's grid point with the best inner 3-fold mean F1.

    Only one parameter axis is searched; ties keep the earlier grid value.
    """
    entry = MODEL_CATALOG[name]
    params = dict(base or {})
    if not entry.grid:
        return params
    folds = kfold_stratified(ds, TUNING_FOLDS, seed)
    best_score, best_params = -1.0, params
    for key, values in entry.grid.items():
        if key in params:
            continue
        for value in values:
            candidate = {**params, key: value}
            scores = []
            for train_rows, test_rows in folds.folds():
                model = train_model(name, ds.subset(train_rows), seed, candidate)
                scores.append(evaluate(ds.labels[test_rows], model.score(ds.features[test_rows])).f1)
            mean = float(np.mean(scores))
            _LOGGER.debug("Tuning %s: %s=%s -> F1 %.4f", name, key, value, mean)
            if mean > best_score:
                best_score, best_params = mean, candidate
    _LOGGER.info("Tuned %s: %s (inner F1 %.4f)", name, best_params, best_score)
    return best_params


# =============================================================================
# Configuration
# =============================================================================

def _unique(names: list[str]) -> list[str]:
    if len(set(names)) != len(names):
        raise vol.Invalid("model names must be unique")
    return names


CONFIG_SCHEMA = vol.Schema(
    {
        vol.Optional("roster", default=list(DEFAULT_ROSTER)): vol.All(
            [vol.In(MODEL_CATALOG)], vol.Length(min=1), _unique
        ),
        vol.Optional("protocol", default="holdout"): vol.In(("holdout", "kfold")),
        vol.Optional("train_ratio", default=DEFAULT_TRAIN_RATIO): vol.All(
            vol.Coerce(float), vol.Range(min=0.0, max=1.0, min_included=False, max_included=False)
        ),
        vol.Optional("folds", default=DEFAULT_FOLDS): vol.All(int, vol.Range(min=2)),
        vol.Optional("seed", default=DEFAULT_SEED): int,
        vol.Optional("overrides", default=dict): {vol.In(MODEL_CATALOG): {str: object}},
        vol.Optional("tune", default=False): bool,
        vol.Optional("consensus", default=True): bool,
        vol.Optional("n_jobs", default=1): int,
        vol.Optional("features", default=None): vol.Any(None, [str]),
        vol.Optional("out_dir", default="runs"): str,
    },
    extra=vol.PREVENT_EXTRA,
)


@dataclass(frozen=True)
class BenchmarkConfig:
    """Validated benchmark settings."""
    roster: tuple[str, ...] = DEFAULT_ROSTER
    protocol: str = "holdout"
    train_ratio: float = DEFAULT_TRAIN_RATIO
    folds: int = DEFAULT_FOLDS
    seed: int = DEFAULT_SEED
    overrides: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    tune: bool = False
    consensus: bool = True
    n_jobs: int = 1
    features: tuple[str, ...] | None = None
    out_dir: str = "runs"

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any] | None = None) -> BenchmarkConfig:
        try:
            valid = CONFIG_SCHEMA(dict(data or {}))
        except vol.Invalid as err:
            raise ConfigInvalid(f"invalid benchmark config: {err}") from err
        valid["roster"] = tuple(valid["roster"])
        if valid["features"] is not None:
            valid["features"] = tuple(valid["features"])
        return cls(**valid)

    @classmethod
    def from_file(cls, path: Path | str) -> BenchmarkConfig:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigInvalid(f"cannot read config {path}: {err}") from err
        return cls.from_mapping(data)

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["roster"] = list(self.roster)
        payload["overrides"] = {k: dict(v) for k, v in self.overrides.items()}
        payload["features"] = None if self.features is None else list(self.features)
        return payload

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def family_of(self, name: str) -> str:
        return MODEL_CATALOG[name].family


# =============================================================================
# Benchmark run
# =============================================================================

@dataclass
class ModelOutcome:
    """Result of one roster entry; failed outcomes carry an error message."""
    name: str
    family: str
    success: bool
    scores: np.ndarray | None = None
    labels: np.ndarray | None = None
    model: TrainedModel | None = None
    params: dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0
    error_message: str | None = None


@dataclass
class BenchmarkResult:
    config: BenchmarkConfig
    leaderboard: pd.DataFrame
    reports: dict[str, EvalReport]
    outcomes: dict[str, ModelOutcome]
    dataset_fingerprint: str
    split_sizes: dict[str, int]
    consensus: pd.DataFrame | None = None
    pca: pd.DataFrame | None = None
    pca_ratios: list[float] = field(default_factory=list)

    @property
    def failures(self) -> dict[str, str]:
        return {name: o.error_message or "" for name, o in self.outcomes.items() if not o.success}

    @property
    def timings(self) -> pd.DataFrame:
        return pd.DataFrame(
            [{"model": o.name, "seconds": round(o.seconds, 3)} for o in self.outcomes.values()]
        )


def _run_model(
    name: str, pairs: list[tuple[Dataset, Dataset]], seed: int, params: Mapping[str, Any], tune: bool
) -> ModelOutcome:
    """Fit and score one model over (train, test) pairs; never raises."""
    family = MODEL_CATALOG[name].family
    start = time.perf_counter()
    try:
        scores, labels, model, used = [], [], None, dict(params)
        for fold_train, fold_test in pairs:
            used = tune_params(name, fold_train, seed, params) if tune else dict(params)
            model = train_model(name, fold_train, seed, used)
            scores.append(model.score(fold_test.features))
            labels.append(fold_test.labels)
        outcome = ModelOutcome(
            name, family, True, np.concatenate(scores), np.concatenate(labels),
            model if len(pairs) == 1 else None, used,
        )
    except Exception as err:  # a failed model must not abort the run
        _LOGGER.warning("Model %s failed: %s", name, err)
        outcome = ModelOutcome(name, family, False, error_message=f"{type(err).__name__}: {err}")
    outcome.seconds = time.perf_counter() - start
    return outcome


def _sort_key(row: Mapping[str, Any]) -> tuple:
    if row["status"] != "ok":
        return (1, 0.0, 0.0, row["model"])
    return (0, -row["f1"], -row["recall"], row["model"])


def build_leaderboard(reports: Mapping[str, EvalReport], outcomes: Mapping[str, ModelOutcome]) -> pd.DataFrame:
    """One row per roster model, sorted by (f1 desc, recall desc, name asc); failures last."""
    rows = []
    for name, outcome in outcomes.items():
        row: dict[str, Any] = {"model": name, "family": outcome.family, "status": "ok" if outcome.success else "failed"}
        if outcome.success:
            row.update(reports[name].to_row())
            row.pop("split", None)
        else:
            row.update({metric: np.nan for metric in METRIC_NAMES})
            row["undefined"] = ""
            row["n"] = 0
        row["error"] = outcome.error_message or ""
        rows.append(row)
    rows.sort(key=_sort_key)
    columns = ["model", "family", "status", "n", *METRIC_NAMES, "undefined", "error"]
    return pd.DataFrame(rows, columns=columns)


def run_benchmark(cfg: BenchmarkConfig, ds: Dataset) -> BenchmarkResult:
    """
    Train and evaluate every roster model under the configured protocol.

    Holdout trains on the stratified train split and evaluates on the test
    split. K-fold pools out-of-fold scores and evaluates them once.

    Args:
        cfg: Validated configuration
        ds: Encoded dataset (already restricted to the selected features)

    Returns:
        BenchmarkResult with leaderboard, per-model reports and outcomes
    """
    if not cfg.roster:
        raise ConfigInvalid("roster is empty")
    if cfg.features is not None:
        ds = ds.select(cfg.features)

    if cfg.protocol == "holdout":
        plan = split_stratified(ds, cfg.train_ratio, cfg.seed)
        train, test = plan.apply(ds)
        pairs = [(train, test)]
        split_name = "test"
        split_sizes = {"train": train.n_rows, "test": test.n_rows}
        _LOGGER.info("Holdout split: ratio %.2f, seed %d (%d/%d rows)", cfg.train_ratio, cfg.seed, train.n_rows, test.n_rows)
    else:
        folds = kfold_stratified(ds, cfg.folds, cfg.seed)
        pairs = [(ds.subset(tr), ds.subset(te)) for tr, te in folds.folds()]
        train = ds
        split_name = "cv"
        split_sizes = {f"fold{i}": int(size) for i, size in enumerate(folds.fold_sizes())}
        _LOGGER.info("Stratified %d-fold protocol, seed %d", cfg.folds, cfg.seed)

    results = Parallel(n_jobs=cfg.n_jobs)(
        delayed(_run_model)(name, pairs, cfg.seed, cfg.overrides.get(name, {}), cfg.tune)
        for name in cfg.roster
    )
    outcomes = {outcome.name: outcome for outcome in results}

    reports: dict[str, EvalReport] = {}
    for name, outcome in outcomes.items():
        if not outcome.success:
            continue
        reports[name] = EvalReport(
            model=name,
            split=split_name,
            n=int(outcome.labels.size),
            metrics=evaluate(outcome.labels, outcome.scores),
            calibration=calibration_curve(outcome.labels, outcome.scores),
        )
    leaderboard = build_leaderboard(reports, outcomes)

    consensus = consensus_importance(train, seed=cfg.seed, n_jobs=cfg.n_jobs) if cfg.consensus else None
    projection = pca_project(ds, k=min(2, ds.n_cols))
    failed = sum(not o.success for o in outcomes.values())
    _LOGGER.info("Benchmark finished: %d models, %d failed", len(outcomes), failed)
    return BenchmarkResult(
        config=cfg,
        leaderboard=leaderboard,
        reports=reports,
        outcomes=outcomes,
        dataset_fingerprint=ds.fingerprint(),
        split_sizes=split_sizes,
        consensus=consensus,
        pca=projection.to_frame(ds.labels),
        pca_ratios=[float(r) for r in projection.explained_ratio],
    )


# =============================================================================
# Summaries
# =============================================================================

def _ok_rows(lb: pd.DataFrame) -> pd.DataFrame:
    return lb[lb["status"] == "ok"] if "status" in lb.columns else lb


def family_summary(lb: pd.DataFrame) -> pd.DataFrame:
    """Min, quartiles (linear interpolation) and max per (family, metric)."""
    ok = _ok_rows(lb)
    rows = []
    for family in FAMILIES:
        members = ok[ok["family"] == family]
        if members.empty:
            continue
        for metric in SUMMARY_METRICS:
            values = members[metric].to_numpy(dtype=np.float64)
            q1, median, q3 = np.quantile(values, (0.25, 0.5, 0.75))
            rows.append(
                {
                    "family": family,
                    "metric": metric,
                    "n": int(values.size),
                    "min": float(values.min()),
                    "q1": float(q1),
                    "median": float(median),
                    "q3": float(q3),
                    "max": float(values.max()),
                }
            )
    return pd.DataFrame(rows, columns=["family", "metric", "n", "min", "q1", "median", "q3", "max"])


def agreement_table(lb: pd.DataFrame) -> pd.DataFrame:
    """Kappa/MCC and precision/recall pairs per model, with |kappa - mcc|."""
    table = lb[["model", "family", "cohens_kappa", "mcc", "precision", "recall"]].copy()
    table["kappa_mcc_gap"] = (table["cohens_kappa"] - table["mcc"]).abs()
    return table.reset_index(drop=True)


def performance_profile(lb: pd.DataFrame) -> pd.DataFrame:
    """Per-family mean of the profile metrics."""
    ok = _ok_rows(lb)
    rows = []
    for family in FAMILIES:
        members = ok[ok["family"] == family]
        if members.empty:
            continue
        row = {"family": family}
        row.update({metric: float(members[metric].mean()) for metric in PROFILE_METRICS})
        rows.append(row)
    return pd.DataFrame(rows, columns=["family", *PROFILE_METRICS])


def top_per_family(lb: pd.DataFrame) -> dict[str, str]:
    """Best model of each family by leaderboard order."""
    best: dict[str, str] = {}
    for _, row in _ok_rows(lb).iterrows():
        best.setdefault(row["family"], row["model"])
    return {family: best[family] for family in FAMILIES if family in best}


# =============================================================================
# Artifacts and report
# =============================================================================

CSV_FLOAT = "%.10g"


def write_run(result: BenchmarkResult, out_dir: Path | str) -> Path:
    """Write the run directory: CSV tables, per-model reports, calibration bins and models."""
    run_dir = Path(out_dir)
    for sub in (REPORTS_DIR, CALIBRATION_DIR, MODELS_DIR):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)

    lb = result.leaderboard
    lb.to_csv(run_dir / LEADERBOARD_FILE, index=False, float_format=CSV_FLOAT)
    result.timings.to_csv(run_dir / TIMINGS_FILE, index=False)
    family_summary(lb).to_csv(run_dir / FAMILY_SUMMARY_FILE, index=False, float_format=CSV_FLOAT)
    agreement_table(lb).to_csv(run_dir / AGREEMENT_FILE, index=False, float_format=CSV_FLOAT)
    performance_profile(lb).to_csv(run_dir / PROFILE_FILE, index=False, float_format=CSV_FLOAT)
    if result.consensus is not None:
        result.consensus.to_csv(run_dir / CONSENSUS_FILE, index=False, float_format=CSV_FLOAT)
    if result.pca is not None:
        result.pca.to_csv(run_dir / PCA_FILE, index=False, float_format=CSV_FLOAT)

    for name, report in result.reports.items():
        (run_dir / REPORTS_DIR / f"{name}.json").write_text(report.to_json(), encoding="utf-8")
        if report.calibration is not None:
            report.calibration.to_frame().to_csv(
                run_dir / CALIBRATION_DIR / f"{name}.csv", index=False, float_format=CSV_FLOAT
            )
    for name, outcome in result.outcomes.items():
        if outcome.model is not None:
            save_model(outcome.model, run_dir / MODELS_DIR / f"{name}.json", name)

    run = {
        "timestamp": datetime.now().isoformat(),
        "seed": result.config.seed,
        "config": result.config.to_dict(),
        "config_hash": result.config.config_hash(),
        "dataset_fingerprint": result.dataset_fingerprint,
        "split_sizes": result.split_sizes,
        "params": {name: o.params for name, o in result.outcomes.items() if o.success},
        "failures": result.failures,
        "pca_explained_ratio": result.pca_ratios,
    }
    (run_dir / RUN_FILE).write_text(json.dumps(run, indent=2, sort_keys=True, default=str), encoding="utf-8")
    _LOGGER.info("Wrote run artifacts to %s", run_dir)
    return run_dir


def _markdown_table(frame: pd.DataFrame, digits: int = 4) -> str:
    def cell(value: Any) -> str:
        if isinstance(value, (float, np.floating)):
            return "" if np.isnan(value) else f"{value:.{digits}f}"
        return str(value)

    header = "| " + " | ".join(map(str, frame.columns)) + " |"
    divider = "|" + "|".join("---" for _ in frame.columns) + "|"
    body = ["| " + " | ".join(cell(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, divider, *body])


def emit_report(run_dir: Path | str) -> Path:
    """
    Render report.md from the run directory.

    Raises:
        MissingArtifacts: leaderboard, run metadata or a needed calibration
            table is absent
    """
    run_dir = Path(run_dir)
    required = [run_dir / LEADERBOARD_FILE, run_dir / RUN_FILE]
    missing = [p.name for p in required if not p.exists()]
    if missing:
        raise MissingArtifacts(f"{run_dir} lacks {', '.join(missing)}")

    lb = pd.read_csv(run_dir / LEADERBOARD_FILE, keep_default_na=True)
    lb["undefined"] = lb["undefined"].fillna("")
    lb["error"] = lb["error"].fillna("")
    run = json.loads((run_dir / RUN_FILE).read_text(encoding="utf-8"))

    lines = [
        "# Malnutrition screening benchmark",
        "",
        "## Provenance",
        "",
        f"- generated: {run['timestamp']}",
        f"- seed: {run['seed']}",
        f"- config hash: `{run['config_hash']}`",
        f"- dataset fingerprint: `{run['dataset_fingerprint']}`",
        f"- protocol: {run['config']['protocol']} ({', '.join(f'{k}={v}' for k, v in run['split_sizes'].items())})",
        "",
        "## Leaderboard",
        "",
        _markdown_table(lb[["model", "family", "status", *METRIC_NAMES]]),
        "",
        "## Family summary",
        "",
        _markdown_table(family_summary(lb)),
        "",
        "## Performance profile",
        "",
        _markdown_table(performance_profile(lb)),
        "",
        "## Agreement and precision-recall trade-off",
        "",
        _markdown_table(agreement_table(lb)),
        "",
        "## Calibration",
    ]
    for family, model in top_per_family(lb).items():
        path = run_dir / CALIBRATION_DIR / f"{model}.csv"
        if not path.exists():
            raise MissingArtifacts(f"calibration table for {model} is missing")
        lines += ["", f"### {family}: {model}", "", _markdown_table(pd.read_csv(path))]

    consensus_path = run_dir / CONSENSUS_FILE
    lines += ["", "## Consensus feature importance", ""]
    if consensus_path.exists():
        lines.append(_markdown_table(pd.read_csv(consensus_path)))
    else:
        lines.append("Not computed for this run.")

    ratios = run.get("pca_explained_ratio") or []
    lines += ["", "## Separability (PCA)", ""]
    lines.append(
        "Explained variance ratio: " + ", ".join(f"PC{i + 1} {r:.4f}" for i, r in enumerate(ratios))
        if ratios else "Not computed for this run."
    )

    failures = run.get("failures") or {}
    if failures:
        lines += ["", "## Failures", ""]
        lines += [f"- {name}: {message}" for name, message in sorted(failures.items())]

    report = run_dir / REPORT_FILE
    report.write_text("\n".join(lines) + "\n", encoding="utf-8")
    _LOGGER.info("Wrote report to %s", report)
    return report
