"""
Boosting learners: SAMME AdaBoost over stumps and one histogram GBDT engine
with presets for the XGBoost, LightGBM, HistGB and CatBoost styles.
"""
from __future__ import annotations

import heapq
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Any, ClassVar

import numpy as np
from scipy import special

from .const import (
    DEFAULT_SEED,
    GBDT_BINS,
    GBDT_L2_LEAF,
    GBDT_LEARNING_RATE,
    GBDT_MAX_DEPTH,
    GBDT_MAX_LEAVES,
    GBDT_ROUNDS,
)
from .data_model import Dataset, TrainedModel
from .errors import InvalidHyperparameter

_LOGGER = logging.getLogger(__name__)

EPSILON_FLOOR = 1e-10
LEAF = -1
MAX_STEP_HALVINGS = 30


# =============================================================================
# AdaBoost
# =============================================================================

@dataclass(frozen=True)
class Stump:
    """Depth-1 vote: polarity if x >= threshold else -polarity."""
    feature: int
    threshold: float
    polarity: int
    alpha: float

    def vote(self, features: np.ndarray) -> np.ndarray:
        return np.where(features[:, self.feature] >= self.threshold, self.polarity, -self.polarity)


@dataclass(eq=False)
class AdaBoostModel(TrainedModel):
    """Weighted stump vote; score = sigmoid(sum alpha * h(x))."""
    kind: ClassVar[str] = "adaboost"
    stumps: list[Stump]
    input_width: int
    errors: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.input_width

    @property
    def error_bound(self) -> float:
        """Product of 2*sqrt(eps*(1-eps)) over kept rounds."""
        return float(np.prod([2.0 * math.sqrt(e * (1.0 - e)) for e in self.errors])) if self.errors else 1.0

    def decision(self, features: np.ndarray) -> np.ndarray:
        rows = self._check_width(features)
        total = np.zeros(rows.shape[0])
        for stump in self.stumps:
            total += stump.alpha * stump.vote(rows)
        return total

    def score(self, features: np.ndarray) -> np.ndarray:
        return special.expit(self.decision(features))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "input_width": self.input_width,
            "errors": list(self.errors),
            "stumps": [asdict(stump) for stump in self.stumps],
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> AdaBoostModel:
        return cls(
            stumps=[Stump(**item) for item in payload["stumps"]],
            input_width=int(payload["input_width"]),
            errors=[float(e) for e in payload.get("errors", [])],
        )


def best_stump(features: np.ndarray, signs: np.ndarray, weights: np.ndarray) -> tuple[float, int, float, int]:
    """
    Lowest weighted-error stump as (error, feature, threshold, polarity).

    Ties keep the lower feature, then the lower threshold, then polarity +1.
    """
    best = (math.inf, LEAF, 0.0, 1)
    total = weights.sum()
    for feat in range(features.shape[1]):
        values, inverse = np.unique(features[:, feat], return_inverse=True)
        if values.size < 2:
            continue
        w_pos = np.bincount(inverse, weights=weights * (signs > 0), minlength=values.size)
        w_neg = np.bincount(inverse, weights=weights * (signs < 0), minlength=values.size)
        # polarity +1 predicts -1 below the threshold: errors are positives below, negatives above
        below_pos = np.cumsum(w_pos)[:-1]
        above_neg = w_neg.sum() - np.cumsum(w_neg)[:-1]
        err_plus = below_pos + above_neg
        err_minus = total - err_plus
        i_plus, i_minus = int(np.argmin(err_plus)), int(np.argmin(err_minus))
        for err, at, polarity in ((err_plus[i_plus], i_plus, 1), (err_minus[i_minus], i_minus, -1)):
            threshold = float((values[at] + values[at + 1]) / 2.0)
            if err < best[0] - 1e-15 or (
                abs(err - best[0]) <= 1e-15 and best[1] == feat and threshold < best[2]
            ):
                best = (float(err), feat, threshold, polarity)
    return best


def fit_adaboost(ds: Dataset, n_rounds: int = 50, seed: int | None = DEFAULT_SEED) -> AdaBoostModel:
    """
    SAMME AdaBoost with decision stumps.

    Each round fits the lowest weighted-error stump, sets
    alpha = 0.5*ln((1-eps)/eps) and reweights w <- w*exp(-alpha*y*h(x)),
    renormalised. A stump with eps >= 0.5 is dropped and training halts; a
    perfect stump is kept (eps floored at 1e-10) and training halts.

    Args:
        ds: Training data
        n_rounds: Maximum number of stumps
        seed: Unused; stump search is exhaustive and deterministic

    Returns:
        AdaBoostModel
    """
    if n_rounds < 1:
        raise InvalidHyperparameter(f"n_rounds must be >= 1, got {n_rounds}")
    signs = np.where(ds.labels == 1, 1.0, -1.0)
    weights = np.full(ds.n_rows, 1.0 / ds.n_rows)
    stumps: list[Stump] = []
    errors: list[float] = []

    for round_no in range(1, n_rounds + 1):
        error, feat, threshold, polarity = best_stump(ds.features, signs, weights)
        if feat == LEAF or error >= 0.5:
            _LOGGER.debug("AdaBoost halted at round %d (weighted error %.4f)", round_no, error)
            break
        perfect = error <= EPSILON_FLOOR
        error = max(error, EPSILON_FLOOR)
        alpha = 0.5 * math.log((1.0 - error) / error)
        stump = Stump(feature=feat, threshold=threshold, polarity=polarity, alpha=alpha)
        stumps.append(stump)
        errors.append(error)
        if perfect:
            break
        weights = weights * np.exp(-alpha * signs * stump.vote(ds.features))
        weights /= weights.sum()

    model = AdaBoostModel(stumps=stumps, input_width=ds.n_cols, errors=errors)
    if stumps:
        train_error = float(np.mean((model.decision(ds.features) >= 0) != (signs > 0)))
        if train_error > model.error_bound + 1e-9:
            _LOGGER.warning(
                "AdaBoost training error %.4f exceeds its bound %.4f", train_error, model.error_bound
            )
    return model


# =============================================================================
# Histogram GBDT
# =============================================================================

LEVEL_WISE = "level_wise"
LEAF_WISE = "leaf_wise"


@dataclass(frozen=True)
class GbdtConfig:
    """Boosting schedule and tree-growth settings."""
    n_rounds: int = GBDT_ROUNDS
    learning_rate: float = GBDT_LEARNING_RATE
    growth: str = LEVEL_WISE
    max_depth: int | None = GBDT_MAX_DEPTH
    max_leaves: int | None = None
    n_bins: int = GBDT_BINS
    l2_leaf: float = GBDT_L2_LEAF
    second_order: bool = True
    symmetric: bool = False
    min_leaf: int = 1

    def __post_init__(self) -> None:
        if self.n_rounds < 0:
            raise InvalidHyperparameter(f"n_rounds must be >= 0, got {self.n_rounds}")
        if not 0.0 < self.learning_rate <= 1.0:
            raise InvalidHyperparameter(f"learning_rate must be in (0, 1], got {self.learning_rate}")
        if self.n_bins < 2:
            raise InvalidHyperparameter(f"n_bins must be >= 2, got {self.n_bins}")
        if self.l2_leaf < 0:
            raise InvalidHyperparameter(f"l2_leaf must be >= 0, got {self.l2_leaf}")
        if self.min_leaf < 1:
            raise InvalidHyperparameter(f"min_leaf must be >= 1, got {self.min_leaf}")
        if self.growth == LEVEL_WISE:
            if self.max_depth is None or self.max_depth < 1:
                raise InvalidHyperparameter("level_wise growth needs max_depth >= 1")
            if self.max_leaves is not None:
                raise InvalidHyperparameter("level_wise growth is limited by max_depth only")
        elif self.growth == LEAF_WISE:
            if self.max_leaves is None or self.max_leaves < 2:
                raise InvalidHyperparameter("leaf_wise growth needs max_leaves >= 2")
            if self.max_depth is not None:
                raise InvalidHyperparameter("leaf_wise growth is limited by max_leaves only")
            if self.symmetric:
                raise InvalidHyperparameter("symmetric trees grow level by level")
        else:
            raise InvalidHyperparameter(f"unknown growth {self.growth!r}")

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


GBDT_PRESETS: dict[str, GbdtConfig] = {
    "xgboost": GbdtConfig(growth=LEVEL_WISE, max_depth=GBDT_MAX_DEPTH, second_order=True),
    "lightgbm": GbdtConfig(
        growth=LEAF_WISE, max_depth=None, max_leaves=GBDT_MAX_LEAVES, second_order=True
    ),
    "histgb": GbdtConfig(growth=LEVEL_WISE, max_depth=GBDT_MAX_DEPTH, second_order=False, l2_leaf=0.0),
    "catboost": GbdtConfig(
        growth=LEVEL_WISE, max_depth=GBDT_MAX_DEPTH, second_order=True, symmetric=True, l2_leaf=3.0
    ),
}


def preset(name: str, **overrides: Any) -> GbdtConfig:
    """Named GBDT configuration with optional field overrides."""
    try:
        base = GBDT_PRESETS[name]
    except KeyError:
        raise InvalidHyperparameter(f"unknown GBDT preset {name!r}") from None
    return replace(base, **overrides) if overrides else base


def bin_edges(column: np.ndarray, n_bins: int) -> np.ndarray:
    """
    Equal-frequency bin edges of one training column.

    With at most n_bins distinct values the edges are the midpoints between
    consecutive values, so binning loses nothing.
    """
    values = np.unique(column)
    if values.size <= 1:
        return np.empty(0)
    if values.size <= n_bins:
        return (values[:-1] + values[1:]) / 2.0
    quantiles = np.quantile(column, np.linspace(0.0, 1.0, n_bins + 1)[1:-1])
    edges = np.unique(quantiles)
    # an edge equal to the column minimum would leave bin 0 empty
    return edges[edges > values[0]]


def apply_bins(features: np.ndarray, edges: list[np.ndarray]) -> np.ndarray:
    """Bin index per cell: the number of edges <= value (out-of-range clamps)."""
    binned = np.empty(features.shape, dtype=np.int64)
    for feat, feat_edges in enumerate(edges):
        binned[:, feat] = np.searchsorted(feat_edges, features[:, feat], side="right")
    return binned


@dataclass(eq=False)
class RegressionTree:
    """Log-odds increment tree over binned features; left when bin <= split_bin."""
    feature: np.ndarray
    split_bin: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply_binned(self, binned: np.ndarray) -> np.ndarray:
        nodes = np.zeros(binned.shape[0], dtype=np.int64)
        active = self.feature[nodes] != LEAF
        while active.any():
            idx = np.flatnonzero(active)
            current = nodes[idx]
            go_left = binned[idx, self.feature[current]] <= self.split_bin[current]
            nodes[idx] = np.where(go_left, self.left[current], self.right[current])
            active[idx] = self.feature[nodes[idx]] != LEAF
        return nodes

    def predict_binned(self, binned: np.ndarray) -> np.ndarray:
        return self.value[self.apply_binned(binned)]

    def splits(self) -> list[tuple[int, float]]:
        """(feature, threshold) of internal nodes in node order."""
        return [
            (int(f), float(t)) for f, t in zip(self.feature, self.threshold) if f != LEAF
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "feature": self.feature.tolist(),
            "split_bin": self.split_bin.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> RegressionTree:
        return cls(
            feature=np.asarray(payload["feature"], dtype=np.int64),
            split_bin=np.asarray(payload["split_bin"], dtype=np.int64),
            threshold=np.asarray(payload["threshold"], dtype=np.float64),
            left=np.asarray(payload["left"], dtype=np.int64),
            right=np.asarray(payload["right"], dtype=np.int64),
            value=np.asarray(payload["value"], dtype=np.float64),
        )


@dataclass(eq=False)
class BoostedModel(TrainedModel):
    """score = sigmoid(base + learning_rate * sum of tree outputs)."""
    kind: ClassVar[str] = "gbdt"
    config: GbdtConfig
    base_score: float
    edges: list[np.ndarray]
    trees: list[RegressionTree] = field(default_factory=list)
    loss_curve: list[float] = field(default_factory=list)
    feature_gain: np.ndarray | None = None

    @property
    def n_features(self) -> int:
        return len(self.edges)

    def raw_score(self, features: np.ndarray) -> np.ndarray:
        binned = apply_bins(self._check_width(features), self.edges)
        total = np.full(binned.shape[0], self.base_score)
        for tree in self.trees:
            total += self.config.learning_rate * tree.predict_binned(binned)
        return total

    def score(self, features: np.ndarray) -> np.ndarray:
        return special.expit(self.raw_score(features))

    @property
    def importances(self) -> np.ndarray:
        gain = self.feature_gain if self.feature_gain is not None else np.zeros(self.n_features)
        total = gain.sum()
        return gain / total if total > 0 else gain

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "config": self.config.to_dict(),
            "base_score": self.base_score,
            "edges": [e.tolist() for e in self.edges],
            "trees": [tree.to_dict() for tree in self.trees],
            "loss_curve": list(self.loss_curve),
            "feature_gain": None if self.feature_gain is None else self.feature_gain.tolist(),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> BoostedModel:
        gain = payload.get("feature_gain")
        return cls(
            config=GbdtConfig(**payload["config"]),
            base_score=float(payload["base_score"]),
            edges=[np.asarray(e, dtype=np.float64) for e in payload["edges"]],
            trees=[RegressionTree.from_dict(item) for item in payload["trees"]],
            loss_curve=[float(v) for v in payload.get("loss_curve", [])],
            feature_gain=None if gain is None else np.asarray(gain, dtype=np.float64),
        )


@dataclass
class _Node:
    rows: np.ndarray
    depth: int
    grad_sum: float
    hess_sum: float


@dataclass
class _Split:
    gain: float
    feature: int
    split_bin: int


class TreeGrower:
    """Grows one regression tree on binned features from gradients/Hessians."""

    def __init__(
        self,
        binned: np.ndarray,
        n_bins_per_feature: np.ndarray,
        edges: list[np.ndarray],
        gradients: np.ndarray,
        hessians: np.ndarray,
        config: GbdtConfig,
    ) -> None:
        self.binned = binned
        self.edges = edges
        self.gradients = gradients
        self.hessians = hessians
        self.config = config
        self.lam = config.l2_leaf if config.second_order else 0.0
        self.n_features = binned.shape[1]
        self.width = int(n_bins_per_feature.max()) if n_bins_per_feature.size else 1
        self.n_bins_per_feature = n_bins_per_feature
        self.offsets = np.arange(self.n_features) * self.width
        self.feature_gain = np.zeros(self.n_features)

        self.feature: list[int] = []
        self.split_bin: list[int] = []
        self.threshold: list[float] = []
        self.left: list[int] = []
        self.right: list[int] = []
        self.value: list[float] = []
        self.nodes: list[_Node] = []

    # -- bookkeeping ---------------------------------------------------------

    def _leaf_value(self, node: _Node) -> float:
        if node.rows.size == 0:
            return 0.0
        return -node.grad_sum / (node.hess_sum + self.lam)

    def _add(self, rows: np.ndarray, depth: int) -> int:
        node = _Node(rows, depth, float(self.gradients[rows].sum()), float(self.hessians[rows].sum()))
        self.nodes.append(node)
        self.feature.append(LEAF)
        self.split_bin.append(0)
        self.threshold.append(0.0)
        self.left.append(LEAF)
        self.right.append(LEAF)
        self.value.append(self._leaf_value(node))
        return len(self.nodes) - 1

    def _histograms(self, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(grad, hess, count) histograms, shape (n_features, width)."""
        codes = (self.binned[rows] + self.offsets).ravel()
        size = self.n_features * self.width
        g = np.bincount(codes, weights=np.repeat(self.gradients[rows], self.n_features), minlength=size)
        h = np.bincount(codes, weights=np.repeat(self.hessians[rows], self.n_features), minlength=size)
        c = np.bincount(codes, minlength=size)
        shape = (self.n_features, self.width)
        return g.reshape(shape), h.reshape(shape), c.reshape(shape)

    def _gain_table(self, node: _Node) -> np.ndarray:
        """Gain of every (feature, split_bin) candidate; -inf where invalid."""
        g, h, c = self._histograms(node.rows)
        gl, hl, cl = np.cumsum(g, axis=1), np.cumsum(h, axis=1), np.cumsum(c, axis=1)
        G, H, n = node.grad_sum, node.hess_sum, node.rows.size
        gr, hr, cr = G - gl, H - hl, n - cl
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = 0.5 * (gl**2 / (hl + self.lam) + gr**2 / (hr + self.lam) - G**2 / (H + self.lam))
        min_leaf = self.config.min_leaf
        bins = np.arange(self.width)[None, :]
        valid = (
            (cl >= min_leaf)
            & (cr >= min_leaf)
            & (bins < (self.n_bins_per_feature[:, None] - 1))
            & np.isfinite(gain)
        )
        return np.where(valid, gain, -np.inf)

    def _best(self, node: _Node) -> _Split | None:
        if node.rows.size < 2 * self.config.min_leaf:
            return None
        table = self._gain_table(node)
        at = int(np.argmax(table))
        feat, split_bin = divmod(at, self.width)
        gain = float(table[feat, split_bin])
        if not gain > 1e-12:
            return None
        return _Split(gain, feat, split_bin)

    def _split(self, node_id: int, split: _Split) -> tuple[int, int]:
        node = self.nodes[node_id]
        goes_left = self.binned[node.rows, split.feature] <= split.split_bin
        left = self._add(node.rows[goes_left], node.depth + 1)
        right = self._add(node.rows[~goes_left], node.depth + 1)
        self.feature[node_id] = split.feature
        self.split_bin[node_id] = split.split_bin
        self.threshold[node_id] = float(self.edges[split.feature][split.split_bin])
        self.left[node_id] = left
        self.right[node_id] = right
        self.feature_gain[split.feature] += max(split.gain, 0.0)
        return left, right

    # -- growth policies -----------------------------------------------------

    def grow(self) -> RegressionTree:
        self._add(np.arange(self.binned.shape[0]), 0)
        if self.config.symmetric:
            self._grow_symmetric()
        elif self.config.growth == LEAF_WISE:
            self._grow_leaf_wise()
        else:
            self._grow_level_wise()
        return RegressionTree(
            feature=np.asarray(self.feature, dtype=np.int64),
            split_bin=np.asarray(self.split_bin, dtype=np.int64),
            threshold=np.asarray(self.threshold, dtype=np.float64),
            left=np.asarray(self.left, dtype=np.int64),
            right=np.asarray(self.right, dtype=np.int64),
            value=np.asarray(self.value, dtype=np.float64),
        )

    def _grow_level_wise(self) -> None:
        frontier = [0]
        for _ in range(self.config.max_depth):
            next_frontier = []
            for node_id in frontier:
                split = self._best(self.nodes[node_id])
                if split is not None:
                    next_frontier.extend(self._split(node_id, split))
            if not next_frontier:
                break
            frontier = next_frontier

    def _grow_leaf_wise(self) -> None:
        heap: list[tuple[float, int, _Split]] = []

        def push(node_id: int) -> None:
            split = self._best(self.nodes[node_id])
            if split is not None:
                heapq.heappush(heap, (-split.gain, node_id, split))

        push(0)
        n_leaves = 1
        while heap and n_leaves < self.config.max_leaves:
            _, node_id, split = heapq.heappop(heap)
            left, right = self._split(node_id, split)
            n_leaves += 1
            push(left)
            push(right)

    def _grow_symmetric(self) -> None:
        """Oblivious tree: one (feature, bin) split shared by a whole level."""
        frontier = [0]
        for _ in range(self.config.max_depth):
            total = None
            for node_id in frontier:
                node = self.nodes[node_id]
                if node.rows.size == 0:
                    continue
                table = self._gain_table(node)
                table = np.where(np.isfinite(table), table, 0.0)
                total = table if total is None else total + table
            if total is None:
                break
            at = int(np.argmax(total))
            feat, split_bin = divmod(at, self.width)
            if not total[feat, split_bin] > 1e-12 or split_bin >= self.n_bins_per_feature[feat] - 1:
                break
            # nodes where the shared split breaks min_leaf stay leaves
            next_frontier = []
            for node_id in frontier:
                node = self.nodes[node_id]
                if node.rows.size < 2 * self.config.min_leaf:
                    continue
                node_gain = float(self._gain_table(node)[feat, split_bin])
                if not np.isfinite(node_gain):
                    continue
                next_frontier.extend(self._split(node_id, _Split(node_gain, feat, split_bin)))
            if not next_frontier:
                break
            frontier = next_frontier


def log_loss(labels: np.ndarray, raw: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, raw) - labels * raw))


def fit_gbdt(ds: Dataset, cfg: GbdtConfig | None = None, seed: int | None = DEFAULT_SEED) -> BoostedModel:
    """
    Gradient-boosted trees on logistic loss over histogram-binned features.

    A round whose tree would raise the training loss has its leaf values
    halved until it does not, so the loss curve never rises.

    Args:
        ds: Training data
        cfg: Growth and schedule settings (xgboost preset when None)
        seed: Unused; binning and split search are deterministic

    Returns:
        BoostedModel with its per-round training loss curve
    """
    cfg = cfg or GBDT_PRESETS["xgboost"]
    labels = ds.labels.astype(np.float64)
    prevalence = float(np.clip(labels.mean(), 1e-12, 1 - 1e-12)) if ds.n_rows else 0.5
    base = math.log(prevalence / (1.0 - prevalence))

    edges = [bin_edges(ds.features[:, feat], cfg.n_bins) for feat in range(ds.n_cols)]
    binned = apply_bins(ds.features, edges)
    n_bins_per_feature = np.array([e.size + 1 for e in edges], dtype=np.int64)

    raw = np.full(ds.n_rows, base)
    trees: list[RegressionTree] = []
    curve: list[float] = [log_loss(labels, raw)]
    feature_gain = np.zeros(ds.n_cols)

    for round_no in range(cfg.n_rounds):
        p = special.expit(raw)
        gradients = p - labels
        hessians = p * (1.0 - p) if cfg.second_order else np.ones(ds.n_rows)
        grower = TreeGrower(binned, n_bins_per_feature, edges, gradients, hessians, cfg)
        tree = grower.grow()
        if not np.all(np.isfinite(tree.value)):
            _LOGGER.warning("GBDT round %d produced non-finite leaves; stopping", round_no)
            break
        step = tree.predict_binned(binned)
        shrink = 1.0
        candidate = raw + cfg.learning_rate * step
        loss = log_loss(labels, candidate)
        halvings = 0
        # a Newton leaf can overshoot; halve the round until the loss does not rise
        while loss > curve[-1] and halvings < MAX_STEP_HALVINGS:
            shrink *= 0.5
            halvings += 1
            candidate = raw + cfg.learning_rate * (step * shrink)
            loss = log_loss(labels, candidate)
        if loss > curve[-1]:
            _LOGGER.info("GBDT round %d found no descent; stopping", round_no)
            break
        if halvings:
            _LOGGER.debug("GBDT round %d shrunk by %g", round_no, shrink)
            tree = replace(tree, value=tree.value * shrink)
        trees.append(tree)
        feature_gain += grower.feature_gain
        raw = candidate
        curve.append(loss)

    _LOGGER.debug(
        "Fitted GBDT (%s, %s-order): %d trees, final loss %.5f",
        cfg.growth, "second" if cfg.second_order else "first", len(trees), curve[-1],
    )
    return BoostedModel(
        config=cfg,
        base_score=base,
        edges=edges,
        trees=trees,
        loss_curve=curve,
        feature_gain=feature_gain,
    )


def score_boosted(model: BoostedModel, row: np.ndarray) -> np.ndarray:
    """Probability for one row or a matrix of rows."""
    return model.score(row)
