"""
Evaluation metrics, reliability bins, consensus feature importance and the
PCA separability projection.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any

import numpy as np
import pandas as pd
from scipy import stats

from .const import CALIBRATION_BINS, DECISION_THRESHOLD, DEFAULT_SEED, METRIC_NAMES
from .data_model import Dataset
from .errors import (
    ConvergenceFailure,
    EmptyEvaluation,
    InvalidHyperparameter,
    LengthMismatch,
    NonBinaryValue,
    NoPositives,
    ProbabilityOutOfRange,
    SingleClassEvaluation,
)
from .models_boosting import fit_gbdt
from .models_classic import fit_forest, fit_l1_logreg, select_l1_strength
from .preprocess import standardize

_LOGGER = logging.getLogger(__name__)

PCA_TOLERANCE = 1e-9
PCA_MAX_ITER = 1000


def _paired(y_true: Any, other: Any, what: str) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y_true)
    v = np.asarray(other, dtype=np.float64)
    if y.shape != v.shape or y.ndim != 1:
        raise LengthMismatch(f"labels have shape {y.shape}, {what} have shape {v.shape}")
    if y.size and not np.isin(y, (0, 1)).all():
        raise NonBinaryValue("labels must be 0 or 1")
    return y.astype(np.int64), v


# =============================================================================
# Threshold metrics
# =============================================================================

@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def n(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(y_true: Any, y_pred: Any) -> ConfusionMatrix:
    """Exact TP/TN/FP/FN counts."""
    y, pred = _paired(y_true, y_pred, "predictions")
    if pred.size and not np.isin(pred, (0, 1)).all():
        raise NonBinaryValue("predictions must be 0 or 1")
    pred = pred.astype(np.int64)
    return ConfusionMatrix(
        tp=int(np.sum((y == 1) & (pred == 1))),
        tn=int(np.sum((y == 0) & (pred == 0))),
        fp=int(np.sum((y == 0) & (pred == 1))),
        fn=int(np.sum((y == 1) & (pred == 0))),
    )


@dataclass(frozen=True)
class MetricSet:
    """
    The ten evaluation metrics.

    Ratios with a zero denominator are reported as 0 and listed in
    `undefined`. Ranking metrics are None until computed from scores.
    """
    accuracy: float
    precision: float
    recall: float
    f1: float
    balanced_accuracy: float
    cohens_kappa: float
    mcc: float
    roc_auc: float | None = None
    average_precision: float | None = None
    brier: float | None = None
    undefined: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        payload = {name: getattr(self, name) for name in METRIC_NAMES}
        payload["undefined"] = list(self.undefined)
        return payload


def _ratio(num: float, den: float, name: str, undefined: list[str]) -> float:
    if den == 0:
        undefined.append(name)
        return 0.0
    return num / den


def threshold_metrics(cm: ConfusionMatrix) -> MetricSet:
    """Accuracy, precision, recall, F1, balanced accuracy, kappa and MCC."""
    n = cm.n
    if n == 0:
        raise EmptyEvaluation("no rows to evaluate")
    undefined: list[str] = []
    tp, tn, fp, fn = cm.tp, cm.tn, cm.fp, cm.fn

    accuracy = (tp + tn) / n
    precision = _ratio(tp, tp + fp, "precision", undefined)
    recall = _ratio(tp, tp + fn, "recall", undefined)
    specificity = _ratio(tn, tn + fp, "specificity", undefined)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn, "f1", undefined)

    expected = ((tp + fp) * (tp + fn) + (fn + tn) * (fp + tn)) / (n * n)
    kappa = _ratio(accuracy - expected, 1.0 - expected, "cohens_kappa", undefined)
    denominator = math.sqrt(float(tp + fp) * (tp + fn) * (tn + fp) * (tn + fn))
    mcc = _ratio(tp * tn - fp * fn, denominator, "mcc", undefined)

    return MetricSet(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        balanced_accuracy=(recall + specificity) / 2.0,
        cohens_kappa=kappa,
        mcc=mcc,
        undefined=tuple(undefined),
    )


# =============================================================================
# Ranking and probability metrics
# =============================================================================

def roc_auc(y_true: Any, scores: Any) -> float:
    """Mann-Whitney AUC from average ranks; tied pairs count one half."""
    y, s = _paired(y_true, scores, "scores")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClassEvaluation("ROC AUC needs both classes")
    ranks = stats.rankdata(s)
    return float((ranks[y == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def average_precision(y_true: Any, scores: Any) -> float:
    """Sum of (R_n - R_{n-1}) * P_n over descending score thresholds; ties form one threshold."""
    y, s = _paired(y_true, scores, "scores")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise NoPositives("average precision needs at least one positive label")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of equal scores
    group_end = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s_sorted.size - 1]
    tp = np.cumsum(y_sorted)[group_end]
    predicted = group_end + 1
    precision = tp / predicted
    recall = tp / n_pos
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def brier(y_true: Any, probs: Any) -> float:
    y, p = _paired(y_true, probs, "probabilities")
    if p.size and (np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p))):
        raise ProbabilityOutOfRange("probabilities must lie in [0, 1]")
    if not p.size:
        raise EmptyEvaluation("no rows to evaluate")
    return float(np.mean((p - y) ** 2))


@dataclass(frozen=True, eq=False)
class CalibrationCurve:
    """Equal-width reliability bins; empty bins carry NaN means."""
    n_bins: int
    bin_low: np.ndarray
    bin_high: np.ndarray
    mean_pred: np.ndarray
    frac_pos: np.ndarray
    count: np.ndarray

    @property
    def undefined(self) -> np.ndarray:
        return self.count == 0

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "bin_low": self.bin_low,
                "bin_high": self.bin_high,
                "mean_pred": self.mean_pred,
                "frac_pos": self.frac_pos,
                "count": self.count,
            }
        )


def calibration_curve(y_true: Any, probs: Any, n_bins: int = CALIBRATION_BINS) -> CalibrationCurve:
    """Per-bin mean prediction and positive fraction; the last bin is closed at 1."""
    y, p = _paired(y_true, probs, "probabilities")
    if p.size and (np.any(p < 0.0) or np.any(p > 1.0) or not np.all(np.isfinite(p))):
        raise ProbabilityOutOfRange("probabilities must lie in [0, 1]")
    if n_bins < 1:
        raise InvalidHyperparameter(f"n_bins must be >= 1, got {n_bins}")
    bins = np.minimum((p * n_bins).astype(np.int64), n_bins - 1)
    count = np.bincount(bins, minlength=n_bins)
    pred_sum = np.bincount(bins, weights=p, minlength=n_bins)
    pos_sum = np.bincount(bins, weights=y, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_pred = np.where(count > 0, pred_sum / count, np.nan)
        frac_pos = np.where(count > 0, pos_sum / count, np.nan)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    return CalibrationCurve(n_bins, edges[:-1], edges[1:], mean_pred, frac_pos, count)


def evaluate(y_true: Any, scores: Any, threshold: float = DECISION_THRESHOLD) -> MetricSet:
    """All ten metrics from class-1 probabilities."""
    y, s = _paired(y_true, scores, "scores")
    if y.size == 0:
        raise EmptyEvaluation("no rows to evaluate")
    metrics = threshold_metrics(confusion(y, (s >= threshold).astype(np.int64)))
    undefined = list(metrics.undefined)
    try:
        auc = roc_auc(y, s)
    except SingleClassEvaluation:
        auc = 0.0
        undefined.append("roc_auc")
    try:
        ap = average_precision(y, s)
    except NoPositives:
        ap = 0.0
        undefined.append("average_precision")
    return replace(metrics, roc_auc=auc, average_precision=ap, brier=brier(y, s), undefined=tuple(undefined))


@dataclass
class EvalReport:
    """Metrics of one model on one split."""
    model: str
    split: str
    n: int
    metrics: MetricSet
    calibration: CalibrationCurve | None = None

    def to_row(self) -> dict[str, Any]:
        row: dict[str, Any] = {"model": self.model, "split": self.split, "n": self.n}
        row.update({name: getattr(self.metrics, name) for name in METRIC_NAMES})
        row["undefined"] = ";".join(self.metrics.undefined)
        return row

    def to_json(self) -> str:
        return json.dumps(
            {"model": self.model, "split": self.split, "n": self.n, "metrics": self.metrics.to_dict()},
            indent=2,
        )


def evaluate_model(model: Any, ds: Dataset, name: str = "", split: str = "test") -> EvalReport:
    """Score a TrainedModel on a dataset and collect its report."""
    scores = model.score(ds.features)
    return EvalReport(
        model=name or model.kind,
        split=split,
        n=ds.n_rows,
        metrics=evaluate(ds.labels, scores),
        calibration=calibration_curve(ds.labels, scores),
    )


# =============================================================================
# Consensus importance
# =============================================================================

def mutual_information(column: np.ndarray, labels: np.ndarray) -> float:
    """Plug-in mutual information (nats) between a discrete column and the label."""
    _, x_codes = np.unique(column, return_inverse=True)
    _, y_codes = np.unique(labels, return_inverse=True)
    n = column.shape[0]
    joint = np.zeros((x_codes.max() + 1, y_codes.max() + 1))
    np.add.at(joint, (x_codes, y_codes), 1.0)
    joint /= n
    outer = joint.sum(axis=1, keepdims=True) * joint.sum(axis=0, keepdims=True)
    nonzero = joint > 0
    return float(max(np.sum(joint[nonzero] * np.log(joint[nonzero] / outer[nonzero])), 0.0))


def min_max(scores: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant vector maps to zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    span = scores.max() - scores.min() if scores.size else 0.0
    if span <= 0:
        return np.zeros_like(scores)
    return (scores - scores.min()) / span


def consensus_importance(ds: Dataset, seed: int = DEFAULT_SEED, n_jobs: int = 1) -> pd.DataFrame:
    """
    Average of four min-max normalised importance sources.

    Sources: mutual information, GBDT split gain, random-forest impurity
    importance and |L1-logistic coefficient| on standardized features.

    Returns:
        One row per feature sorted by consensus score (ties by feature
        index), with the per-source scores and a 1-based rank
    """
    mi = np.array([mutual_information(ds.features[:, j], ds.labels) for j in range(ds.n_cols)])
    gbdt = fit_gbdt(ds, seed=seed).importances
    forest = fit_forest(ds, seed=seed, n_jobs=n_jobs).importances
    scaled, _ = standardize(ds)
    strength, _ = select_l1_strength(scaled, seed=seed)
    l1 = np.abs(fit_l1_logreg(scaled, strength).weights)

    frame = pd.DataFrame(
        {
            "feature": ds.feature_names,
            "mutual_info": min_max(mi),
            "gbdt": min_max(gbdt),
            "random_forest": min_max(forest),
            "l1": min_max(l1),
        }
    )
    frame["consensus"] = frame[["mutual_info", "gbdt", "random_forest", "l1"]].mean(axis=1)
    frame["index"] = np.arange(ds.n_cols)
    frame = frame.sort_values(["consensus", "index"], ascending=[False, True], kind="mergesort")
    frame["rank"] = np.arange(1, ds.n_cols + 1)
    _LOGGER.info("Consensus importance: top feature %s", frame["feature"].iloc[0] if len(frame) else None)
    return frame.drop(columns="index").reset_index(drop=True)


# =============================================================================
# PCA
# =============================================================================

@dataclass(frozen=True, eq=False)
class PcaProjection:
    scores: np.ndarray
    components: np.ndarray
    explained_ratio: np.ndarray
    eigenvalues: np.ndarray = field(default_factory=lambda: np.empty(0))

    def to_frame(self, labels: np.ndarray | None = None) -> pd.DataFrame:
        frame = pd.DataFrame(self.scores, columns=[f"pc{i + 1}" for i in range(self.scores.shape[1])])
        if labels is not None:
            frame["label"] = labels
        return frame


def _top_eigenvector(
    matrix: np.ndarray, rng: np.random.Generator, tol: float, max_iter: int
) -> np.ndarray:
    """
    Leading eigenvector of a PSD matrix by power iteration on repeated squares.

    Each step applies M^(2^k) to the iterate, so the gap ratio is raised to
    a doubling power.
    """
    current = matrix / np.trace(matrix)
    vector = rng.normal(size=matrix.shape[0])
    vector /= np.linalg.norm(vector)
    for _ in range(max_iter):
        moved = current @ vector
        norm = np.linalg.norm(moved)
        if norm == 0.0:
            vector = rng.normal(size=matrix.shape[0])
            vector /= np.linalg.norm(vector)
            continue
        moved /= norm
        if np.linalg.norm(moved - np.sign(moved @ vector) * vector) < tol:
            return moved
        vector = moved
        current = current @ current
        scale = np.trace(current)
        if scale <= 0 or not np.isfinite(scale):
            break
        current /= scale
    raise ConvergenceFailure(f"power iteration did not converge in {max_iter} iterations")


def pca_project(
    data: Dataset | np.ndarray,
    k: int = 2,
    tol: float = PCA_TOLERANCE,
    max_iter: int = PCA_MAX_ITER,
    seed: int = 0,
) -> PcaProjection:
    """
    Top-k principal components by power iteration with deflation.

    Args:
        data: Dataset or raw matrix; columns are centred
        k: Number of components (<= number of columns)
        tol: Convergence tolerance on the unit eigenvector
        max_iter: Iteration cap per component
        seed: Seeds the starting vectors

    Returns:
        PcaProjection with scores, unit components (largest entry positive)
        and explained-variance ratios
    """
    matrix = data.features if isinstance(data, Dataset) else np.asarray(data, dtype=np.float64)
    n, p = matrix.shape
    if not 1 <= k <= p:
        raise InvalidHyperparameter(f"k must be in [1, {p}], got {k}")
    centred = matrix - matrix.mean(axis=0)
    cov = centred.T @ centred / max(n - 1, 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)

    components = np.zeros((k, p))
    eigenvalues = np.zeros(k)
    remaining = cov.copy()
    for i in range(k):
        if np.trace(remaining) <= 1e-12 * max(total, 1e-300):
            # rank exhausted: any unit vector orthogonal to the found components
            vector = rng.normal(size=p)
            vector -= components[:i].T @ (components[:i] @ vector)
            vector /= np.linalg.norm(vector)
        else:
            vector = _top_eigenvector(remaining, rng, tol, max_iter)
        vector *= np.sign(vector[np.argmax(np.abs(vector))])
        value = max(float(vector @ cov @ vector), 0.0)
        components[i] = vector
        eigenvalues[i] = value
        remaining = remaining - value * np.outer(vector, vector)

    ratio = eigenvalues / total if total > 0 else np.zeros(k)
    _LOGGER.debug("PCA explained variance ratios: %s", np.round(ratio, 4).tolist())
    return PcaProjection(
        scores=centred @ components.T,
        components=components,
        explained_ratio=ratio,
        eigenvalues=eigenvalues,
    )
