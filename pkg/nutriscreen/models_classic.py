"""
Traditional learners: logistic regression, LDA, KNN, CART trees, forests
and a primal SVM with an optional random-Fourier RBF map.

Every fit_* function takes an encoded Dataset and returns a TrainedModel
whose score() is a class-1 probability.
"""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Any, ClassVar

import numpy as np
from joblib import Parallel, delayed
from scipy import special

from .const import DEFAULT_FOLDS, DEFAULT_SEED, L1_GRID
from .data_model import Dataset, TrainedModel, kfold_stratified, split_stratified
from .errors import (
    DatasetInvalid,
    InvalidHyperparameter,
    KLargerThanTrainingSet,
    SingleClassDataset,
    SingularCovariance,
)

_LOGGER = logging.getLogger(__name__)

KNN_CHUNK_CELLS = 4_000_000
PLATT_HOLDOUT = 0.2


def _require_two_classes(labels: np.ndarray, what: str) -> None:
    if labels.size == 0 or labels.min() == labels.max():
        raise SingleClassDataset(f"{what} needs both classes in the training data")


# =============================================================================
# Logistic regression
# =============================================================================

@dataclass(eq=False)
class LinearModel(TrainedModel):
    """Linear log-odds model: score = sigmoid(x.w + b)."""
    kind: ClassVar[str] = "linear"
    weights: np.ndarray
    intercept: float
    converged: bool = True
    n_iter: int = 0
    family: str = "logistic_regression"

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def decision(self, features: np.ndarray) -> np.ndarray:
        return self._check_width(features) @ self.weights + self.intercept

    def score(self, features: np.ndarray) -> np.ndarray:
        return special.expit(self.decision(features))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "family": self.family,
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
            "converged": self.converged,
            "n_iter": self.n_iter,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> LinearModel:
        return cls(
            weights=np.asarray(payload["weights"], dtype=np.float64),
            intercept=float(payload["intercept"]),
            converged=bool(payload.get("converged", True)),
            n_iter=int(payload.get("n_iter", 0)),
            family=payload.get("family", "logistic_regression"),
        )


def logistic_objective(
    theta: np.ndarray, features: np.ndarray, labels: np.ndarray, l2: float
) -> tuple[float, np.ndarray]:
    """Mean log-loss plus l2/(2n)*|w|^2 and its gradient; theta = (w, b)."""
    n = labels.shape[0]
    weights, bias = theta[:-1], theta[-1]
    logits = features @ weights + bias
    loss = float(np.mean(np.logaddexp(0.0, logits) - labels * logits) + l2 / (2 * n) * weights @ weights)
    residual = (special.expit(logits) - labels) / n
    grad = np.empty_like(theta)
    grad[:-1] = features.T @ residual + (l2 / n) * weights
    grad[-1] = residual.sum()
    return loss, grad


def fit_logreg(
    ds: Dataset,
    l2: float = 1.0,
    max_iter: int = 2000,
    tol: float = 1e-6,
    seed: int | None = None,
) -> LinearModel:
    """
    L2-penalised logistic regression by full-batch gradient descent.

    Steps start from the Barzilai-Borwein estimate and are halved until the
    Armijo condition holds. Features are expected to be standardized.

    Args:
        ds: Training data
        l2: Penalty strength on the weights (intercept unpenalised)
        max_iter: Iteration cap
        tol: Convergence when the gradient's max-abs entry drops below it
        seed: Unused; the fit is deterministic

    Returns:
        LinearModel, with converged=False when max_iter ran out
    """
    if l2 < 0:
        raise InvalidHyperparameter(f"l2 must be >= 0, got {l2}")
    features, labels = ds.features, ds.labels.astype(np.float64)
    theta = np.zeros(ds.n_cols + 1)
    loss, grad = logistic_objective(theta, features, labels, l2)
    step = 1.0
    converged = False
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        if np.max(np.abs(grad)) < tol:
            converged = True
            break
        sq_norm = float(grad @ grad)
        while True:
            candidate = theta - step * grad
            cand_loss, cand_grad = logistic_objective(candidate, features, labels, l2)
            if cand_loss <= loss - 1e-4 * step * sq_norm or step < 1e-16:
                break
            step *= 0.5
        s, y = candidate - theta, cand_grad - grad
        theta, loss, grad = candidate, cand_loss, cand_grad
        curvature = float(s @ y)
        step = float(s @ s) / curvature if curvature > 1e-20 else 1.0
    else:
        converged = bool(np.max(np.abs(grad)) < tol)

    if not converged:
        _LOGGER.warning(
            "Logistic regression stopped after %d iterations (gradient %.3g > tol %.3g)",
            n_iter, float(np.max(np.abs(grad))), tol,
        )
    return LinearModel(weights=theta[:-1].copy(), intercept=float(theta[-1]), converged=converged, n_iter=n_iter)


def fit_l1_logreg(
    ds: Dataset,
    strength: float,
    max_iter: int = 5000,
    tol: float = 1e-7,
) -> LinearModel:
    """Mean log-loss + strength*|w|_1 by accelerated proximal gradient (FISTA)."""
    if strength < 0:
        raise InvalidHyperparameter(f"L1 strength must be >= 0, got {strength}")
    features, labels = ds.features, ds.labels.astype(np.float64)
    n = ds.n_rows
    design = np.hstack([features, np.ones((n, 1))])
    lipschitz = max(np.linalg.norm(design, 2) ** 2 / (4 * n), 1e-12)
    step = 1.0 / lipschitz

    theta = np.zeros(ds.n_cols + 1)
    momentum_point = theta.copy()
    t = 1.0
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        _, grad = logistic_objective(momentum_point, features, labels, 0.0)
        moved = momentum_point - step * grad
        new_theta = moved.copy()
        new_theta[:-1] = np.sign(moved[:-1]) * np.maximum(np.abs(moved[:-1]) - step * strength, 0.0)
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t * t)) / 2.0
        momentum_point = new_theta + ((t - 1.0) / t_next) * (new_theta - theta)
        change = float(np.max(np.abs(new_theta - theta)))
        theta, t = new_theta, t_next
        if change < tol:
            converged = True
            break
    return LinearModel(
        weights=theta[:-1].copy(),
        intercept=float(theta[-1]),
        converged=converged,
        n_iter=n_iter,
        family="l1_logistic_regression",
    )


def select_l1_strength(
    ds: Dataset,
    grid: tuple[float, ...] = L1_GRID,
    k: int = DEFAULT_FOLDS,
    seed: int = DEFAULT_SEED,
) -> tuple[float, list[float]]:
    """
    L1 strength with the lowest mean validation log-loss over stratified folds.

    Ties keep the larger strength (sparser model).

    Returns:
        (chosen strength, mean validation loss per grid value)
    """
    _require_two_classes(ds.labels, "L1 strength selection")
    smallest = int(min(ds.labels.sum(), ds.n_rows - ds.labels.sum()))
    folds = kfold_stratified(ds, k=max(2, min(k, smallest)), seed=seed)
    losses = []
    for strength in grid:
        fold_losses = []
        for train_rows, test_rows in folds.folds():
            model = fit_l1_logreg(ds.subset(train_rows), strength)
            logits = model.decision(ds.features[test_rows])
            labels = ds.labels[test_rows]
            fold_losses.append(float(np.mean(np.logaddexp(0.0, logits) - labels * logits)))
        losses.append(float(np.mean(fold_losses)))
    best = min(range(len(grid)), key=lambda i: (round(losses[i], 12), -grid[i]))
    _LOGGER.debug("L1 strength %.3g chosen (validation log-loss %.5f)", grid[best], losses[best])
    return float(grid[best]), losses


# =============================================================================
# Linear discriminant analysis
# =============================================================================

@dataclass(eq=False)
class LdaModel(TrainedModel):
    """Two-class Gaussian LDA reduced to its linear log-odds."""
    kind: ClassVar[str] = "lda"
    means: np.ndarray
    priors: np.ndarray
    weights: np.ndarray
    intercept: float

    @property
    def n_features(self) -> int:
        return self.weights.shape[0]

    def score(self, features: np.ndarray) -> np.ndarray:
        return special.expit(self._check_width(features) @ self.weights + self.intercept)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "means": self.means.tolist(),
            "priors": self.priors.tolist(),
            "weights": self.weights.tolist(),
            "intercept": self.intercept,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> LdaModel:
        return cls(
            means=np.asarray(payload["means"], dtype=np.float64),
            priors=np.asarray(payload["priors"], dtype=np.float64),
            weights=np.asarray(payload["weights"], dtype=np.float64),
            intercept=float(payload["intercept"]),
        )


def fit_lda(ds: Dataset) -> LdaModel:
    """Class means, jittered pooled covariance and empirical priors."""
    labels = ds.labels
    _require_two_classes(labels, "LDA")
    groups = [ds.features[labels == c] for c in (0, 1)]
    means = np.vstack([g.mean(axis=0) for g in groups])
    priors = np.array([g.shape[0] for g in groups], dtype=np.float64) / ds.n_rows

    centered = np.vstack([g - m for g, m in zip(groups, means)])
    dof = max(ds.n_rows - 2, 1)
    covariance = centered.T @ centered / dof
    diag_mean = float(np.mean(np.diag(covariance))) if ds.n_cols else 0.0
    jitter = 1e-6 * diag_mean if diag_mean > 0 else 1e-6
    covariance = covariance + jitter * np.eye(ds.n_cols)

    diff = means[1] - means[0]
    try:
        weights = np.linalg.solve(covariance, diff)
    except np.linalg.LinAlgError as err:
        raise SingularCovariance(f"pooled covariance singular after jitter {jitter:.3g}") from err
    if not np.all(np.isfinite(weights)):
        raise SingularCovariance("pooled covariance solve produced non-finite weights")
    intercept = float(-0.5 * (means[1] + means[0]) @ weights + math.log(priors[1] / priors[0]))
    return LdaModel(means=means, priors=priors, weights=weights, intercept=intercept)


# =============================================================================
# k-nearest neighbours
# =============================================================================

def _matrix_hash(features: np.ndarray, labels: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(features, dtype=np.float64).tobytes())
    digest.update(np.ascontiguousarray(labels, dtype=np.int64).tobytes())
    return digest.hexdigest()


@dataclass(eq=False)
class KnnModel(TrainedModel):
    """Lazy k-NN; score is the class-1 share among the k nearest rows."""
    kind: ClassVar[str] = "knn"
    train_features: np.ndarray
    train_labels: np.ndarray
    k: int
    source: str | None = None

    @property
    def n_features(self) -> int:
        return self.train_features.shape[1]

    @property
    def data_hash(self) -> str:
        return _matrix_hash(self.train_features, self.train_labels)

    def neighbours(self, features: np.ndarray) -> np.ndarray:
        """Indices of the k nearest training rows; ties go to the lower index."""
        rows = self._check_width(features)
        n_train = self.train_features.shape[0]
        chunk = max(1, KNN_CHUNK_CELLS // max(1, n_train * max(1, self.n_features)))
        out = np.empty((rows.shape[0], self.k), dtype=np.int64)
        for start in range(0, rows.shape[0], chunk):
            block = rows[start:start + chunk]
            diff = block[:, None, :] - self.train_features[None, :, :]
            dist = np.einsum("ijk,ijk->ij", diff, diff)
            out[start:start + chunk] = np.argsort(dist, axis=1, kind="stable")[:, : self.k]
        return out

    def score(self, features: np.ndarray) -> np.ndarray:
        return self.train_labels[self.neighbours(features)].mean(axis=1)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "k": self.k,
            "source": self.source,
            "data_hash": self.data_hash,
            "train_features": self.train_features.tolist(),
            "train_labels": self.train_labels.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> KnnModel:
        model = cls(
            train_features=np.asarray(payload["train_features"], dtype=np.float64),
            train_labels=np.asarray(payload["train_labels"], dtype=np.int64),
            k=int(payload["k"]),
            source=payload.get("source"),
        )
        expected = payload.get("data_hash")
        if expected and expected != model.data_hash:
            raise DatasetInvalid("KNN training data does not match its stored hash")
        return model


def fit_knn(ds: Dataset, k: int = 5, source: str | None = None) -> KnnModel:
    """Store the (standardized) training matrix for k-NN scoring."""
    if k < 1:
        raise InvalidHyperparameter(f"k must be >= 1, got {k}")
    if k > ds.n_rows:
        raise KLargerThanTrainingSet(f"k={k} exceeds {ds.n_rows} training rows")
    return KnnModel(
        train_features=np.array(ds.features),
        train_labels=np.array(ds.labels),
        k=k,
        source=source,
    )


# =============================================================================
# CART trees
# =============================================================================

LEAF = -1


def _gini_sum(count: np.ndarray, positives: np.ndarray) -> np.ndarray:
    """count * gini impurity, safe for empty sides."""
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(count > 0, positives / np.maximum(count, 1), 0.0)
    return count * 2.0 * p * (1.0 - p)


@dataclass(eq=False)
class TreeModel(TrainedModel):
    """Binary tree stored as parallel node arrays (node 0 is the root)."""
    kind: ClassVar[str] = "tree"
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_samples: np.ndarray
    importances: np.ndarray

    @property
    def n_features(self) -> int:
        return self.importances.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.feature.shape[0]

    @property
    def depth(self) -> int:
        depths = np.zeros(self.n_nodes, dtype=np.int64)
        for node in range(self.n_nodes):
            if self.feature[node] != LEAF:
                depths[self.left[node]] = depths[self.right[node]] = depths[node] + 1
        return int(depths.max())

    def apply(self, features: np.ndarray) -> np.ndarray:
        """Leaf node index reached by each row."""
        rows = self._check_width(features)
        nodes = np.zeros(rows.shape[0], dtype=np.int64)
        active = self.feature[nodes] != LEAF
        while active.any():
            idx = np.flatnonzero(active)
            current = nodes[idx]
            go_left = rows[idx, self.feature[current]] < self.threshold[current]
            nodes[idx] = np.where(go_left, self.left[current], self.right[current])
            active[idx] = self.feature[nodes[idx]] != LEAF
        return nodes

    def score(self, features: np.ndarray) -> np.ndarray:
        return self.value[self.apply(features)]

    def _node_dict(self, node: int) -> dict[str, Any]:
        if self.feature[node] == LEAF:
            return {"value": float(self.value[node]), "n_samples": int(self.n_samples[node])}
        return {
            "feature": int(self.feature[node]),
            "threshold": float(self.threshold[node]),
            "value": float(self.value[node]),
            "n_samples": int(self.n_samples[node]),
            "left": self._node_dict(int(self.left[node])),
            "right": self._node_dict(int(self.right[node])),
        }

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "importances": self.importances.tolist(),
            "root": self._node_dict(0),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> TreeModel:
        builder = _NodeArrays()

        def visit(node: dict[str, Any]) -> int:
            index = builder.add(node["value"], node["n_samples"])
            if "feature" in node:
                left = visit(node["left"])
                right = visit(node["right"])
                builder.split(index, node["feature"], node["threshold"], left, right)
            return index

        visit(payload["root"])
        return builder.finish(np.asarray(payload["importances"], dtype=np.float64))


class _NodeArrays:
    """Growable node storage shared by tree builders."""

    def __init__(self) -> None:
        self.feature: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.n_samples: list[int] = []

    def add(self, value: float, n_samples: int) -> int:
        self.feature.append(LEAF)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(float(value))
        self.n_samples.append(int(n_samples))
        return len(self.feature) - 1

    def split(self, node: int, feature: int, threshold: float, left: int, right: int) -> None:
        self.feature[node] = int(feature)
        self.threshold[node] = float(threshold)
        self.left[node] = left
        self.right[node] = right

    def finish(self, importances: np.ndarray) -> TreeModel:
        return TreeModel(
            feature=np.asarray(self.feature, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.asarray(self.value, dtype=np.float64),
            n_samples=np.asarray(self.n_samples, dtype=np.int64),
            importances=importances,
        )


@dataclass
class _SplitChoice:
    gain: float = 0.0
    feature: int = LEAF
    threshold: float = 0.0


def _best_split(
    features: np.ndarray,
    labels: np.ndarray,
    rows: np.ndarray,
    candidates: np.ndarray,
    min_leaf: int,
    random_splits: bool,
    rng: np.random.Generator,
) -> _SplitChoice:
    """Best Gini decrease over candidate features; ties keep the earlier pair."""
    y = labels[rows]
    n, positives = y.size, float(y.sum())
    parent = float(_gini_sum(np.array([n]), np.array([positives]))[0])
    best = _SplitChoice()

    for feat in candidates:
        column = features[rows, feat]
        if random_splits:
            lo, hi = float(column.min()), float(column.max())
            if lo == hi:
                continue
            threshold = float(rng.uniform(lo, hi))
            if threshold <= lo:
                continue
            goes_left = column < threshold
            n_left = int(goes_left.sum())
            if n_left < min_leaf or n - n_left < min_leaf:
                continue
            pos_left = float(y[goes_left].sum())
            children = _gini_sum(np.array([n_left, n - n_left]), np.array([pos_left, positives - pos_left]))
            gain = parent - float(children.sum())
            if gain > best.gain + 1e-12:
                best = _SplitChoice(gain, int(feat), threshold)
            continue

        values, inverse = np.unique(column, return_inverse=True)
        if values.size < 2:
            continue
        count_left = np.cumsum(np.bincount(inverse, minlength=values.size))[:-1]
        pos_left = np.cumsum(np.bincount(inverse, weights=y, minlength=values.size))[:-1]
        valid = (count_left >= min_leaf) & (n - count_left >= min_leaf)
        if not valid.any():
            continue
        children = _gini_sum(count_left, pos_left) + _gini_sum(n - count_left, positives - pos_left)
        gains = np.where(valid, parent - children, -np.inf)
        at = int(np.argmax(gains))
        if gains[at] > best.gain + 1e-12:
            best = _SplitChoice(float(gains[at]), int(feat), float((values[at] + values[at + 1]) / 2.0))
    return best


def grow_tree(
    features: np.ndarray,
    labels: np.ndarray,
    rows: np.ndarray,
    max_depth: int | None,
    min_leaf: int,
    mtry: int | None,
    random_splits: bool,
    rng: np.random.Generator,
) -> TreeModel:
    """Greedy CART growth over the given (possibly repeated) row indices."""
    n_features = features.shape[1]
    nodes = _NodeArrays()
    importances = np.zeros(n_features)
    root = nodes.add(labels[rows].mean(), rows.size)
    stack = [(root, rows, 0)]

    while stack:
        node, node_rows, depth = stack.pop()
        y = labels[node_rows]
        if (
            (max_depth is not None and depth >= max_depth)
            or node_rows.size < 2 * min_leaf
            or y.min() == y.max()
        ):
            continue
        if mtry is None or mtry >= n_features:
            candidates = np.arange(n_features)
        else:
            candidates = np.sort(rng.choice(n_features, size=mtry, replace=False))
        choice = _best_split(features, labels, node_rows, candidates, min_leaf, random_splits, rng)
        if choice.feature == LEAF:
            continue
        goes_left = features[node_rows, choice.feature] < choice.threshold
        left_rows, right_rows = node_rows[goes_left], node_rows[~goes_left]
        left = nodes.add(labels[left_rows].mean(), left_rows.size)
        right = nodes.add(labels[right_rows].mean(), right_rows.size)
        nodes.split(node, choice.feature, choice.threshold, left, right)
        importances[choice.feature] += choice.gain
        # right first so the left subtree is expanded first
        stack.append((right, right_rows, depth + 1))
        stack.append((left, left_rows, depth + 1))

    total = importances.sum()
    return nodes.finish(importances / total if total > 0 else importances)


def fit_tree(
    ds: Dataset,
    max_depth: int | None = None,
    min_leaf: int = 1,
    criterion: str = "gini",
    seed: int | None = DEFAULT_SEED,
    feature_subsample: float | None = None,
    random_splits: bool = False,
) -> TreeModel:
    """
    Fit a CART classification tree.

    Args:
        ds: Training data
        max_depth: Depth limit (None grows until pure or min_leaf)
        min_leaf: Minimum rows per leaf
        criterion: Only "gini" is supported
        seed: Seed for feature subsampling and random thresholds
        feature_subsample: Share of features tried per node (None = all)
        random_splits: Draw one uniform threshold per feature (extra-trees)

    Returns:
        TreeModel whose leaves hold the class-1 proportion
    """
    if max_depth is not None and max_depth < 1:
        raise InvalidHyperparameter(f"max_depth must be >= 1, got {max_depth}")
    if min_leaf < 1:
        raise InvalidHyperparameter(f"min_leaf must be >= 1, got {min_leaf}")
    if criterion != "gini":
        raise InvalidHyperparameter(f"unsupported criterion {criterion!r}")
    if ds.n_rows == 0:
        raise DatasetInvalid("cannot fit a tree on zero rows")
    mtry = None
    if feature_subsample is not None:
        if not 0.0 < feature_subsample <= 1.0:
            raise InvalidHyperparameter(f"feature_subsample must be in (0, 1], got {feature_subsample}")
        mtry = max(1, math.ceil(feature_subsample * ds.n_cols))
    rng = np.random.default_rng(seed)
    return grow_tree(
        ds.features, ds.labels, np.arange(ds.n_rows), max_depth, min_leaf, mtry, random_splits, rng
    )


# =============================================================================
# Forests
# =============================================================================

@dataclass(eq=False)
class ForestModel(TrainedModel):
    """Tree ensemble; score is the mean of the tree scores."""
    kind: ClassVar[str] = "forest"
    trees: list[TreeModel]
    bootstrap: bool = True
    random_splits: bool = False
    oob_curve: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.trees[0].n_features

    @property
    def importances(self) -> np.ndarray:
        total = np.mean([tree.importances for tree in self.trees], axis=0)
        norm = total.sum()
        return total / norm if norm > 0 else total

    def tree_scores(self, features: np.ndarray) -> np.ndarray:
        rows = self._check_width(features)
        return np.vstack([tree.score(rows) for tree in self.trees])

    def score(self, features: np.ndarray) -> np.ndarray:
        return self.tree_scores(features).mean(axis=0)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "bootstrap": self.bootstrap,
            "random_splits": self.random_splits,
            "oob_curve": list(self.oob_curve),
            "trees": [tree.to_dict() for tree in self.trees],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> ForestModel:
        return cls(
            trees=[TreeModel.from_dict(item) for item in payload["trees"]],
            bootstrap=bool(payload.get("bootstrap", True)),
            random_splits=bool(payload.get("random_splits", False)),
            oob_curve=[float(v) for v in payload.get("oob_curve", [])],
        )


def _fit_member(
    features: np.ndarray,
    labels: np.ndarray,
    seed_seq: np.random.SeedSequence,
    bootstrap: bool,
    max_depth: int | None,
    min_leaf: int,
    mtry: int,
    random_splits: bool,
) -> tuple[TreeModel, np.ndarray]:
    rng = np.random.default_rng(seed_seq)
    n = labels.shape[0]
    rows = rng.integers(0, n, size=n) if bootstrap else np.arange(n)
    tree = grow_tree(features, labels, rows, max_depth, min_leaf, mtry, random_splits, rng)
    in_bag = np.zeros(n, dtype=bool)
    in_bag[rows] = True
    return tree, ~in_bag


def oob_error_curve(trees: list[TreeModel], out_of_bag: list[np.ndarray], ds: Dataset) -> list[float]:
    """Out-of-bag misclassification rate after each added tree."""
    totals = np.zeros(ds.n_rows)
    counts = np.zeros(ds.n_rows)
    curve = []
    for tree, oob in zip(trees, out_of_bag):
        rows = np.flatnonzero(oob)
        if rows.size:
            totals[rows] += tree.score(ds.features[rows])
            counts[rows] += 1
        seen = counts > 0
        if not seen.any():
            curve.append(float("nan"))
            continue
        votes = (totals[seen] / counts[seen] >= 0.5).astype(np.int64)
        curve.append(float(np.mean(votes != ds.labels[seen])))
    return curve


def fit_forest(
    ds: Dataset,
    n_trees: int = 100,
    max_depth: int | None = None,
    min_leaf: int = 1,
    mtry: int | None = None,
    bootstrap: bool = True,
    random_splits: bool = False,
    seed: int = DEFAULT_SEED,
    n_jobs: int = 1,
) -> ForestModel:
    """
    Random forest (bootstrap, best splits) or extra trees (no bootstrap,
    random thresholds). Each tree gets its own spawned seed, so the result
    does not depend on n_jobs.
    """
    if n_trees < 1:
        raise InvalidHyperparameter(f"n_trees must be >= 1, got {n_trees}")
    mtry = mtry if mtry is not None else max(1, math.ceil(math.sqrt(ds.n_cols)))
    if not 1 <= mtry <= ds.n_cols:
        raise InvalidHyperparameter(f"mtry must be in [1, {ds.n_cols}], got {mtry}")
    if max_depth is not None and max_depth < 1:
        raise InvalidHyperparameter(f"max_depth must be >= 1, got {max_depth}")

    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    members = Parallel(n_jobs=n_jobs)(
        delayed(_fit_member)(
            ds.features, ds.labels, seed_seq, bootstrap, max_depth, min_leaf, mtry, random_splits
        )
        for seed_seq in seeds
    )
    trees = [tree for tree, _ in members]
    curve = oob_error_curve(trees, [oob for _, oob in members], ds) if bootstrap else []
    _LOGGER.debug("Fitted forest: %d trees, mtry=%d, bootstrap=%s", n_trees, mtry, bootstrap)
    return ForestModel(trees=trees, bootstrap=bootstrap, random_splits=random_splits, oob_curve=curve)


# =============================================================================
# SVM
# =============================================================================

@dataclass(frozen=True, eq=False)
class RandomFourierMap:
    """Random features z(x) with z(x).z(y) ~ exp(-gamma |x - y|^2)."""
    omega: np.ndarray
    phase: np.ndarray
    gamma: float

    @classmethod
    def sample(cls, n_features: int, n_components: int, gamma: float, seed: int | None) -> RandomFourierMap:
        if n_components < 1 or gamma <= 0:
            raise InvalidHyperparameter("random Fourier map needs D >= 1 and gamma > 0")
        rng = np.random.default_rng(seed)
        omega = rng.normal(0.0, math.sqrt(2.0 * gamma), size=(n_features, n_components))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=n_components)
        return cls(omega=omega, phase=phase, gamma=gamma)

    @property
    def n_components(self) -> int:
        return self.phase.shape[0]

    def transform(self, features: np.ndarray) -> np.ndarray:
        return math.sqrt(2.0 / self.n_components) * np.cos(features @ self.omega + self.phase)

    def kernel(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Approximate kernel between matching rows of a and b."""
        return np.sum(self.transform(a) * self.transform(b), axis=1)


@dataclass(eq=False)
class SvmModel(TrainedModel):
    """Primal linear SVM on raw or random-Fourier features with Platt scaling."""
    kind: ClassVar[str] = "svm"
    weights: np.ndarray
    bias: float
    platt_a: float
    platt_b: float
    input_width: int
    feature_map: RandomFourierMap | None = None

    @property
    def n_features(self) -> int:
        return self.input_width

    def margin(self, features: np.ndarray) -> np.ndarray:
        rows = self._check_width(features)
        if self.feature_map is not None:
            rows = self.feature_map.transform(rows)
        return rows @ self.weights + self.bias

    def score(self, features: np.ndarray) -> np.ndarray:
        return special.expit(self.platt_a * self.margin(features) + self.platt_b)

    def to_dict(self) -> dict[str, Any]:
        payload = {
            "kind": self.kind,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "platt_a": self.platt_a,
            "platt_b": self.platt_b,
            "input_width": self.input_width,
            "kernel": "linear",
        }
        if self.feature_map is not None:
            payload.update(
                kernel="rbf_rff",
                gamma=self.feature_map.gamma,
                omega=self.feature_map.omega.tolist(),
                phase=self.feature_map.phase.tolist(),
            )
        return payload

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> SvmModel:
        feature_map = None
        if payload.get("kernel") == "rbf_rff":
            feature_map = RandomFourierMap(
                omega=np.asarray(payload["omega"], dtype=np.float64),
                phase=np.asarray(payload["phase"], dtype=np.float64),
                gamma=float(payload["gamma"]),
            )
        return cls(
            weights=np.asarray(payload["weights"], dtype=np.float64),
            bias=float(payload["bias"]),
            platt_a=float(payload["platt_a"]),
            platt_b=float(payload["platt_b"]),
            input_width=int(payload["input_width"]),
            feature_map=feature_map,
        )


def pegasos(
    features: np.ndarray,
    labels: np.ndarray,
    C: float,
    epochs: int,
    seed: int | None,
    batch_size: int = 32,
) -> tuple[np.ndarray, float]:
    """
    Averaged mini-batch Pegasos on the mean hinge loss with lambda = 1/(C n).

    The bias is learned as the weight of a constant column.
    """
    n = labels.shape[0]
    lam = 1.0 / (C * n)
    design = np.hstack([features, np.ones((n, 1))])
    signs = np.where(labels == 1, 1.0, -1.0)
    rng = np.random.default_rng(seed)
    w = np.zeros(design.shape[1])
    w_sum = np.zeros_like(w)
    radius = 1.0 / math.sqrt(lam)
    t = 0
    for _ in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            batch = order[start:start + batch_size]
            t += 1
            eta = 1.0 / (lam * t)
            margins = signs[batch] * (design[batch] @ w)
            violators = batch[margins < 1.0]
            w *= 1.0 - eta * lam
            if violators.size:
                w += (eta / batch.size) * (signs[violators] @ design[violators])
            norm = np.linalg.norm(w)
            if norm > radius:
                w *= radius / norm
            w_sum += w
    w_avg = w_sum / max(t, 1)
    return w_avg[:-1], float(w_avg[-1])


def fit_platt(
    margins: np.ndarray,
    labels: np.ndarray,
    max_iter: int = 100,
    slope_penalty: float = 1.0,
) -> tuple[float, float]:
    """
    Sigmoid p = expit(a*f + b) fitted by Newton steps on smoothed targets.

    A small ridge on the slope keeps near-zero margins from being blown up,
    so a heavily regularised SVM scores close to the base rate.
    """
    n_pos = float(labels.sum())
    n_neg = float(labels.size - n_pos)
    targets = np.where(labels == 1, (n_pos + 1.0) / (n_pos + 2.0), 1.0 / (n_neg + 2.0))
    a, b = 0.0, math.log((n_pos + 1.0) / (n_neg + 1.0))

    def loss(a_: float, b_: float) -> float:
        z = a_ * margins + b_
        return float(np.sum(np.logaddexp(0.0, z) - targets * z) + 0.5 * slope_penalty * a_ * a_)

    current = loss(a, b)
    for _ in range(max_iter):
        p = special.expit(a * margins + b)
        d = p - targets
        grad = np.array([d @ margins + slope_penalty * a, d.sum()])
        weight = p * (1.0 - p)
        hess = np.array([
            [weight @ (margins * margins) + slope_penalty + 1e-12, weight @ margins],
            [weight @ margins, weight.sum() + 1e-12],
        ])
        if np.max(np.abs(grad)) < 1e-10:
            break
        try:
            direction = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            direction = grad
        step = 1.0
        while step > 1e-10:
            cand_a, cand_b = a - step * direction[0], b - step * direction[1]
            cand = loss(cand_a, cand_b)
            if cand <= current:
                break
            step *= 0.5
        else:
            break
        a, b, current = cand_a, cand_b, cand
    return float(a), float(b)


def fit_svm(
    ds: Dataset,
    kernel: str = "rbf_rff",
    C: float = 1.0,
    epochs: int = 20,
    seed: int = DEFAULT_SEED,
    n_components: int = 512,
    gamma: float | None = None,
) -> SvmModel:
    """
    Soft-margin SVM in the primal, optionally on random Fourier features.

    Platt scaling is fitted on margins of a seeded 20% stratified holdout
    from a model trained on the other 80%; the returned SVM is then
    refitted on all rows.

    Args:
        ds: Standardized training data
        kernel: "linear" or "rbf_rff"
        C: Inverse regularisation strength
        epochs: Passes over the data
        seed: Seed for the map, the holdout and the sample order
        n_components: D, the number of random features
        gamma: RBF width (default 1 / n_features)

    Returns:
        SvmModel
    """
    if C <= 0:
        raise InvalidHyperparameter(f"C must be > 0, got {C}")
    if epochs < 1:
        raise InvalidHyperparameter(f"epochs must be >= 1, got {epochs}")
    _require_two_classes(ds.labels, "SVM")

    feature_map = None
    design = ds.features
    if kernel == "rbf_rff":
        gamma = gamma if gamma is not None else 1.0 / max(ds.n_cols, 1)
        feature_map = RandomFourierMap.sample(ds.n_cols, n_components, gamma, seed)
        design = feature_map.transform(ds.features)
    elif kernel != "linear":
        raise InvalidHyperparameter(f"unknown SVM kernel {kernel!r}")

    positives = int(ds.labels.sum())
    if min(positives, ds.n_rows - positives) >= 2 and ds.n_rows >= 10:
        plan = split_stratified(ds, ratio=1.0 - PLATT_HOLDOUT, seed=seed)
        train, hold = plan.train_indices, plan.test_indices
        inner_w, inner_b = pegasos(design[train], ds.labels[train], C, epochs, seed)
        platt_a, platt_b = fit_platt(design[hold] @ inner_w + inner_b, ds.labels[hold])
    else:
        inner_w, inner_b = pegasos(design, ds.labels, C, epochs, seed)
        platt_a, platt_b = fit_platt(design @ inner_w + inner_b, ds.labels)

    weights, bias = pegasos(design, ds.labels, C, epochs, seed)
    _LOGGER.debug("Fitted %s SVM: C=%s, Platt a=%.4f b=%.4f", kernel, C, platt_a, platt_b)
    return SvmModel(
        weights=weights,
        bias=bias,
        platt_a=platt_a,
        platt_b=platt_b,
        input_width=ds.n_cols,
        feature_map=feature_map,
    )
