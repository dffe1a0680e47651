"""
Feature-selection ensemble: filter statistics, recursive elimination,
sequential forward selection, embedded importances, Boruta and rank
aggregation into the final feature set.
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from typing import Any

import numpy as np
from joblib import Parallel, delayed
from scipy import stats

from .const import (
    DEFAULT_BORUTA_ALPHA,
    DEFAULT_BORUTA_ITERATIONS,
    DEFAULT_FOLDS,
    DEFAULT_OVERRIDES,
    DEFAULT_RANK_THRESHOLD,
    DEFAULT_SEED,
    DEFAULT_SELECTION_METHODS,
    SFS_TOLERANCE,
)
from .data_model import Dataset, FoldPlan, kfold_stratified
from .errors import (
    BaseModelTrainingFailure,
    ConstantLabel,
    FeatureListMismatch,
    InvalidHyperparameter,
    NegativeValueForChiSquare,
    NutriscreenError,
)
from .metrics_eval import confusion, mutual_information, threshold_metrics
from .models_boosting import fit_gbdt, preset
from .models_classic import fit_forest, fit_l1_logreg, fit_logreg, select_l1_strength
from .preprocess import fit_standardizer, standardize

_LOGGER = logging.getLogger(__name__)

BORUTA_TREES = 50
BORUTA_DEPTH = 6
RFE_GBDT_ROUNDS = 50


class Method(StrEnum):
    MUTUAL_INFO = "mutual_info"
    CHI_SQUARE = "chi_square"
    ANOVA_F = "anova_f"
    PEARSON = "pearson"
    VARIANCE = "variance"
    RFE_LOGREG = "rfe_logreg"
    RFE_GB = "rfe_gb"
    SFS = "sfs"
    EMB_RF = "emb_rf"
    EMB_GB = "emb_gb"
    EMB_L1 = "emb_l1"


FILTER_METHODS = (Method.MUTUAL_INFO, Method.CHI_SQUARE, Method.ANOVA_F, Method.PEARSON, Method.VARIANCE)


def rank_scores(scores: np.ndarray) -> np.ndarray:
    """1 = highest score; ties go to the lower feature index."""
    order = np.lexsort((np.arange(scores.size), -np.asarray(scores, dtype=np.float64)))
    ranks = np.empty(scores.size, dtype=np.int64)
    ranks[order] = np.arange(1, scores.size + 1)
    return ranks


@dataclass(frozen=True, eq=False)
class MethodScore:
    """Per-feature scores and ranks from one selection method."""
    method: Method
    feature_names: tuple[str, ...]
    scores: np.ndarray
    ranks: np.ndarray
    selected: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "method", Method(self.method))
        ranks = np.asarray(self.ranks, dtype=np.int64)
        if sorted(ranks.tolist()) != list(range(1, len(self.feature_names) + 1)):
            raise InvalidHyperparameter(f"{self.method} ranks are not a permutation of 1..n")
        object.__setattr__(self, "ranks", ranks)

    @classmethod
    def from_scores(
        cls, method: Method | str, names: Sequence[str], scores: np.ndarray, selected: Sequence[str] = ()
    ) -> MethodScore:
        scores = np.asarray(scores, dtype=np.float64)
        return cls(Method(method), tuple(names), scores, rank_scores(scores), tuple(selected))

    def to_dict(self) -> dict[str, Any]:
        return {
            "method": str(self.method),
            "scores": dict(zip(self.feature_names, map(float, self.scores))),
            "ranks": dict(zip(self.feature_names, map(int, self.ranks))),
            "selected": list(self.selected),
        }


def _require_two_classes(ds: Dataset) -> None:
    if ds.n_rows == 0 or ds.labels.min() == ds.labels.max():
        raise ConstantLabel("feature scoring needs both label values")


# =============================================================================
# Filters
# =============================================================================

def chi_square_statistic(column: np.ndarray, labels: np.ndarray) -> float:
    """Pearson chi-square of the value-by-label contingency table."""
    _, codes = np.unique(column, return_inverse=True)
    table = np.zeros((codes.max() + 1, 2))
    np.add.at(table, (codes, labels), 1.0)
    expected = table.sum(axis=1, keepdims=True) * table.sum(axis=0, keepdims=True) / table.sum()
    return float(np.sum((table - expected) ** 2 / expected))


def anova_f(column: np.ndarray, labels: np.ndarray) -> float:
    """Between-class over within-class mean square for the two label groups."""
    n = column.size
    groups = [column[labels == c] for c in (0, 1)]
    overall = column.mean()
    between = sum(g.size * (g.mean() - overall) ** 2 for g in groups)
    within = sum(((g - g.mean()) ** 2).sum() for g in groups)
    if within == 0:
        return math.inf if between > 0 else 0.0
    return float((between / 1.0) / (within / (n - 2)))


def point_biserial(column: np.ndarray, labels: np.ndarray) -> float:
    """|Pearson correlation| with the 0/1 label; 0 for a constant column."""
    if np.ptp(column) == 0:
        return 0.0
    return float(abs(np.corrcoef(column, labels)[0, 1]))


_FILTERS: dict[Method, Callable[[np.ndarray, np.ndarray], float]] = {
    Method.MUTUAL_INFO: mutual_information,
    Method.CHI_SQUARE: chi_square_statistic,
    Method.ANOVA_F: anova_f,
    Method.PEARSON: point_biserial,
    Method.VARIANCE: lambda column, _: float(np.var(column, ddof=1)) if column.size > 1 else 0.0,
}


def filter_scores(ds: Dataset, method: Method | str) -> MethodScore:
    """
    Score each feature on its own against the label.

    Raises:
        ConstantLabel: Only one label value present
        NegativeValueForChiSquare: chi_square on a negative feature value
    """
    method = Method(method)
    if method not in _FILTERS:
        raise InvalidHyperparameter(f"{method} is not a filter method")
    _require_two_classes(ds)
    if method is Method.CHI_SQUARE and np.any(ds.features < 0):
        bad = [ds.feature_names[j] for j in np.flatnonzero((ds.features < 0).any(axis=0))]
        raise NegativeValueForChiSquare(f"chi-square needs non-negative values; negative in {bad}")
    scorer = _FILTERS[method]
    scores = np.array([scorer(ds.features[:, j], ds.labels) for j in range(ds.n_cols)])
    return MethodScore.from_scores(method, ds.feature_names, scores)


# =============================================================================
# Wrappers
# =============================================================================

def _base_importance(ds: Dataset, base: str, seed: int) -> np.ndarray:
    try:
        if base == "logreg":
            scaled, _ = standardize(ds)
            return np.abs(fit_logreg(scaled).weights)
        if base == "gbdt":
            return fit_gbdt(ds, preset("xgboost", n_rounds=RFE_GBDT_ROUNDS), seed=seed).feature_gain
    except (NutriscreenError, np.linalg.LinAlgError, FloatingPointError) as err:
        raise BaseModelTrainingFailure(f"{base} failed on {ds.n_cols} features: {err}") from err
    raise InvalidHyperparameter(f"unknown RFE base {base!r}")


def rfe(ds: Dataset, base: str = "logreg", n_keep: int = 1, seed: int = DEFAULT_SEED) -> MethodScore:
    """
    Recursive feature elimination.

    Each round refits the base model on the surviving features and drops the
    one with the lowest importance (|coefficient| on standardized features
    for logreg, total split gain for gbdt; ties drop the lower index).
    Eliminated features rank below survivors, latest eliminated first;
    survivors are ranked by the last fit's importance.
    """
    if not 1 <= n_keep < ds.n_cols:
        raise InvalidHyperparameter(f"n_keep must be in [1, {ds.n_cols - 1}], got {n_keep}")
    method = Method.RFE_LOGREG if base == "logreg" else Method.RFE_GB
    active = list(range(ds.n_cols))
    eliminated: list[int] = []
    importance = np.zeros(0)
    while True:
        importance = _base_importance(ds.select([ds.feature_names[j] for j in active]), base, seed)
        if len(active) == n_keep:
            break
        drop = int(np.argmin(importance))
        _LOGGER.debug("RFE(%s) drops %s (importance %.4g)", base, ds.feature_names[active[drop]], importance[drop])
        eliminated.append(active.pop(drop))

    ranks = np.empty(ds.n_cols, dtype=np.int64)
    ranks[active] = rank_scores(importance)
    for position, feat in enumerate(reversed(eliminated)):
        ranks[feat] = n_keep + position + 1
    scores = (ds.n_cols - ranks + 1).astype(np.float64)
    return MethodScore(method, ds.feature_names, scores, ranks, tuple(ds.feature_names[j] for j in active))


def cv_f1(ds: Dataset, columns: Sequence[int], folds: FoldPlan) -> float:
    """Mean validation F1 of the default logistic model on the given columns."""
    values = []
    for train_rows, test_rows in folds.folds():
        train_labels = ds.labels[train_rows]
        if not columns:
            majority = int(train_labels.mean() >= 0.5)
            predicted = np.full(test_rows.size, majority)
        else:
            train = ds.subset(train_rows).select([ds.feature_names[j] for j in columns])
            scaler = fit_standardizer(train.features)
            model = fit_logreg(train.with_features(scaler.transform(train.features)))
            test_features = scaler.transform(ds.features[np.ix_(test_rows, list(columns))])
            predicted = model.predict(test_features)
        values.append(threshold_metrics(confusion(ds.labels[test_rows], predicted)).f1)
    return float(np.mean(values))


def sequential_forward(ds: Dataset, folds: FoldPlan, tolerance: float = SFS_TOLERANCE) -> MethodScore:
    """
    Greedy forward selection on cross-validated F1.

    Stops when the best addition improves F1 by no more than tolerance.
    Added features rank first in addition order; the rest follow by their
    single-feature F1.
    """
    _require_two_classes(ds)
    selected: list[int] = []
    remaining = list(range(ds.n_cols))
    current = cv_f1(ds, [], folds)
    marginal = np.zeros(ds.n_cols)
    gains_at_add: dict[int, float] = {}

    while remaining:
        trial = np.array([cv_f1(ds, selected + [j], folds) for j in remaining])
        if not selected:
            marginal[remaining] = trial
        best = int(np.argmax(trial))
        if trial[best] - current <= tolerance:
            break
        feat = remaining.pop(best)
        selected.append(feat)
        gains_at_add[feat] = float(trial[best])
        current = float(trial[best])
        _LOGGER.debug("SFS adds %s (cv F1 %.4f)", ds.feature_names[feat], current)

    ranks = np.empty(ds.n_cols, dtype=np.int64)
    ranks[selected] = np.arange(1, len(selected) + 1)
    if remaining:
        rest = np.asarray(remaining)
        ranks[rest] = len(selected) + rank_scores(marginal[rest])
    scores = np.array([gains_at_add.get(j, marginal[j]) for j in range(ds.n_cols)])
    _LOGGER.info("SFS selected %d features (cv F1 %.4f)", len(selected), current)
    return MethodScore(Method.SFS, ds.feature_names, scores, ranks, tuple(ds.feature_names[j] for j in selected))


def embedded_importance(ds: Dataset, base: str = "rf", seed: int = DEFAULT_SEED, n_jobs: int = 1) -> MethodScore:
    """Normalized impurity decrease (rf), split gain (gbdt) or |L1 coefficient| (l1_logreg)."""
    if base == "rf":
        return MethodScore.from_scores(Method.EMB_RF, ds.feature_names, fit_forest(ds, seed=seed, n_jobs=n_jobs).importances)
    if base == "gbdt":
        return MethodScore.from_scores(Method.EMB_GB, ds.feature_names, fit_gbdt(ds, seed=seed).importances)
    if base == "l1_logreg":
        scaled, _ = standardize(ds)
        strength, _ = select_l1_strength(scaled, seed=seed)
        weights = np.abs(fit_l1_logreg(scaled, strength).weights)
        return MethodScore.from_scores(Method.EMB_L1, ds.feature_names, weights)
    raise InvalidHyperparameter(f"unknown embedded base {base!r}")


# =============================================================================
# Boruta
# =============================================================================

class BorutaStatus(StrEnum):
    CONFIRMED = "confirmed"
    REJECTED = "rejected"
    TENTATIVE = "tentative"


@dataclass(frozen=True, eq=False)
class BorutaDecision:
    feature_names: tuple[str, ...]
    status: tuple[BorutaStatus, ...]
    hit_counts: np.ndarray
    iterations: int
    alpha: float
    p_values: np.ndarray = field(default_factory=lambda: np.empty(0))

    def __post_init__(self) -> None:
        if np.any(self.hit_counts > self.iterations) or np.any(self.hit_counts < 0):
            raise InvalidHyperparameter("hit counts must lie in [0, iterations]")

    def status_of(self, name: str) -> BorutaStatus:
        return self.status[self.feature_names.index(name)]

    def to_dict(self) -> dict[str, Any]:
        return {
            "iterations": self.iterations,
            "alpha": self.alpha,
            "features": {
                name: {"status": str(status), "hits": int(hits), "p_value": float(p)}
                for name, status, hits, p in zip(self.feature_names, self.status, self.hit_counts, self.p_values)
            },
        }


def _corrected_alpha(alpha: float, n_features: int) -> float:
    """Two directional decisions per feature, Bonferroni over features."""
    return alpha / (2 * max(n_features, 1))


def boruta_thresholds(iterations: int, alpha: float, n_features: int) -> tuple[int, int]:
    """
    Hit counts needed for a decision.

    Returns:
        (minimum hits to confirm, maximum hits to reject); -1 in the second
        slot when no count rejects
    """
    level = _corrected_alpha(alpha, n_features)
    confirm, reject = iterations + 1, -1
    for hits in range(iterations + 1):
        p = stats.binomtest(hits, iterations, 0.5).pvalue
        if p <= level and hits > iterations / 2:
            confirm = min(confirm, hits)
        if p <= level and hits < iterations / 2:
            reject = max(reject, hits)
    return confirm, reject


def _boruta_round(
    features: np.ndarray, labels: np.ndarray, seed_seq: np.random.SeedSequence, n_trees: int, max_depth: int
) -> np.ndarray:
    rng = np.random.default_rng(seed_seq)
    p = features.shape[1]
    shadows = np.column_stack([rng.permutation(features[:, j]) for j in range(p)])
    names = [f"f{j}" for j in range(p)] + [f"shadow{j}" for j in range(p)]
    combined = Dataset(np.hstack([features, shadows]), labels, tuple(names))
    forest = fit_forest(combined, n_trees=n_trees, max_depth=max_depth, seed=int(rng.integers(2**31)))
    importance = forest.importances
    return importance[:p] > importance[p:].max()


def boruta(
    ds: Dataset,
    iterations: int = DEFAULT_BORUTA_ITERATIONS,
    alpha: float = DEFAULT_BORUTA_ALPHA,
    seed: int = DEFAULT_SEED,
    n_jobs: int = 1,
    n_trees: int = BORUTA_TREES,
    max_depth: int = BORUTA_DEPTH,
) -> BorutaDecision:
    """
    Shadow-feature relevance test.

    Each iteration appends a row-permuted copy of every feature, fits a
    random forest and counts a hit for each real feature whose importance
    beats the best shadow. Hit counts are then tested against
    Binomial(iterations, 0.5) at the Bonferroni-corrected level.
    """
    if iterations < 20:
        raise InvalidHyperparameter(f"Boruta needs at least 20 iterations, got {iterations}")
    if not 0.0 < alpha < 1.0:
        raise InvalidHyperparameter(f"alpha must be in (0, 1), got {alpha}")
    _require_two_classes(ds)

    seeds = np.random.SeedSequence(seed).spawn(iterations)
    rounds = Parallel(n_jobs=n_jobs)(
        delayed(_boruta_round)(ds.features, ds.labels, seed_seq, n_trees, max_depth) for seed_seq in seeds
    )
    hits = np.sum(rounds, axis=0).astype(np.int64)
    p_values = np.array([stats.binomtest(int(h), iterations, 0.5).pvalue for h in hits])
    level = _corrected_alpha(alpha, ds.n_cols)
    status = tuple(
        BorutaStatus.CONFIRMED if p <= level and h > iterations / 2
        else BorutaStatus.REJECTED if p <= level and h < iterations / 2
        else BorutaStatus.TENTATIVE
        for h, p in zip(hits, p_values)
    )
    _LOGGER.info(
        "Boruta (%d iterations, alpha %.3g): %d confirmed, %d rejected",
        iterations, alpha, status.count(BorutaStatus.CONFIRMED), status.count(BorutaStatus.REJECTED),
    )
    return BorutaDecision(ds.feature_names, status, hits, iterations, alpha, p_values)


# =============================================================================
# Aggregation
# =============================================================================

@dataclass(frozen=True, eq=False)
class ConsensusRanking:
    feature_names: tuple[str, ...]
    average_rank: np.ndarray
    boruta_status: tuple[BorutaStatus, ...]
    selected: np.ndarray
    rank_threshold: float
    overrides: tuple[str, ...]

    @property
    def order(self) -> np.ndarray:
        """Feature indices by average rank, ties by index."""
        return np.lexsort((np.arange(self.average_rank.size), self.average_rank))

    @property
    def selected_features(self) -> list[str]:
        return [self.feature_names[j] for j in self.order if self.selected[j]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "rank_threshold": self.rank_threshold,
            "overrides": list(self.overrides),
            "ranking": [
                {
                    "feature": self.feature_names[j],
                    "average_rank": float(self.average_rank[j]),
                    "boruta": str(self.boruta_status[j]),
                    "selected": bool(self.selected[j]),
                }
                for j in self.order
            ],
            "selected": self.selected_features,
        }


def aggregate(
    method_scores: Sequence[MethodScore],
    boruta_decision: BorutaDecision,
    rank_threshold: float = DEFAULT_RANK_THRESHOLD,
    overrides: Iterable[str] = DEFAULT_OVERRIDES,
) -> ConsensusRanking:
    """
    Average the method ranks and apply the selection rule.

    A feature is selected when Boruta confirms it, or when its average rank
    is within rank_threshold and it is listed in overrides.
    """
    if not method_scores:
        raise FeatureListMismatch("no method scores to aggregate")
    names = method_scores[0].feature_names
    for score in method_scores[1:]:
        if score.feature_names != names:
            raise FeatureListMismatch(f"{score.method} covers a different feature list")
    if boruta_decision.feature_names != names:
        raise FeatureListMismatch("Boruta decision covers a different feature list")
    overrides = tuple(overrides)
    unknown = sorted(set(overrides) - set(names))
    if unknown:
        _LOGGER.warning("Override features not in the dataset: %s", unknown)

    average = np.mean([score.ranks for score in method_scores], axis=0)
    confirmed = np.array([s is BorutaStatus.CONFIRMED for s in boruta_decision.status])
    overridden = np.array([name in overrides for name in names])
    selected = confirmed | ((average <= rank_threshold) & overridden)
    return ConsensusRanking(names, average, boruta_decision.status, selected, rank_threshold, overrides)


# =============================================================================
# Ensemble run
# =============================================================================

@dataclass
class SelectionResult:
    method_scores: list[MethodScore]
    boruta: BorutaDecision
    consensus: ConsensusRanking

    def to_json(self) -> str:
        return json.dumps(
            {
                "methods": [score.to_dict() for score in self.method_scores],
                "boruta": self.boruta.to_dict(),
                "consensus": self.consensus.to_dict(),
                "selected": self.consensus.selected_features,
            },
            indent=2,
        )


def score_method(ds: Dataset, method: Method | str, seed: int = DEFAULT_SEED, folds: int = DEFAULT_FOLDS) -> MethodScore:
    """Run one named method of the ensemble."""
    method = Method(method)
    match method:
        case Method.CHI_SQUARE:
            # the -1 not-asked sentinel makes raw columns negative
            shifted = ds.with_features(ds.features - ds.features.min(axis=0))
            return filter_scores(shifted, method)
        case _ if method in FILTER_METHODS:
            return filter_scores(ds, method)
        case Method.RFE_LOGREG:
            return rfe(ds, "logreg", 1, seed)
        case Method.RFE_GB:
            return rfe(ds, "gbdt", 1, seed)
        case Method.SFS:
            return sequential_forward(ds, kfold_stratified(ds, folds, seed))
        case Method.EMB_RF:
            return embedded_importance(ds, "rf", seed)
        case Method.EMB_GB:
            return embedded_importance(ds, "gbdt", seed)
        case Method.EMB_L1:
            return embedded_importance(ds, "l1_logreg", seed)
    raise InvalidHyperparameter(f"unknown method {method!r}")


def run_selection(
    ds: Dataset,
    methods: Sequence[str] = DEFAULT_SELECTION_METHODS,
    iterations: int = DEFAULT_BORUTA_ITERATIONS,
    alpha: float = DEFAULT_BORUTA_ALPHA,
    rank_threshold: float = DEFAULT_RANK_THRESHOLD,
    overrides: Iterable[str] = DEFAULT_OVERRIDES,
    seed: int = DEFAULT_SEED,
    n_jobs: int = 1,
) -> SelectionResult:
    """Score every method, run Boruta and aggregate."""
    methods = [Method(m) for m in methods]
    _LOGGER.info("Selection methods (%d): %s", len(methods), ", ".join(methods))
    scores = Parallel(n_jobs=n_jobs)(delayed(score_method)(ds, method, seed) for method in methods)
    decision = boruta(ds, iterations=iterations, alpha=alpha, seed=seed, n_jobs=n_jobs)
    consensus = aggregate(scores, decision, rank_threshold, overrides)
    _LOGGER.info("Selected %d of %d features", int(consensus.selected.sum()), ds.n_cols)
    return SelectionResult(list(scores), decision, consensus)
