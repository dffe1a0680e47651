"""
Shared data representations for nutriscreen.

Defines the column schema, the encoded Dataset every learner consumes, the
stratified train/test and k-fold plans, and the TrainedModel contract that
all model families implement.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from abc import ABC, abstractmethod
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Any, ClassVar

import numpy as np
import pandas as pd

from .const import (
    DECISION_THRESHOLD,
    DEFAULT_FOLDS,
    DEFAULT_SEED,
    DEFAULT_TRAIN_RATIO,
    TARGET_NAME,
)
from .errors import (
    DatasetInvalid,
    DimensionMismatch,
    RatioOutOfRange,
    SchemaError,
    SingleClassDataset,
    TooFewPerClass,
)

_LOGGER = logging.getLogger(__name__)


class ColumnTag(StrEnum):
    """Kind of an encoded schema column."""
    ORDINAL = "ordinal"
    BINARY = "binary"
    TERNARY = "ternary"
    ONEHOT_GROUP = "onehot_group"
    ZSCORE = "zscore"
    IDENTIFIER = "identifier"


class MissingPolicy(StrEnum):
    """What to do with missing raw values in a column."""
    MODE_IMPUTE = "mode_impute"
    NOT_ASKED_RECODE = "not_asked_recode"
    REJECT = "reject"


@dataclass(frozen=True)
class ColumnKind:
    """Encoded column kind with its tag-specific attributes."""
    tag: ColumnTag
    levels: int | None = None
    group_name: str | None = None
    category_index: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", ColumnTag(self.tag))
        if self.tag is ColumnTag.ORDINAL and (self.levels is None or self.levels < 2):
            raise SchemaError(f"ordinal column needs levels >= 2, got {self.levels}")
        if self.tag is ColumnTag.ONEHOT_GROUP and (
            not self.group_name or self.category_index is None
        ):
            raise SchemaError("onehot_group column needs group_name and category_index")

    @property
    def allowed_values(self) -> frozenset[int] | None:
        """Values an encoded cell may take, when the kind restricts them."""
        if self.tag is ColumnTag.BINARY or self.tag is ColumnTag.ONEHOT_GROUP:
            return frozenset({0, 1})
        if self.tag is ColumnTag.TERNARY:
            return frozenset({-1, 0, 1})
        return None

    def to_json(self) -> str | dict[str, Any]:
        if self.tag is ColumnTag.ORDINAL:
            return {"tag": self.tag.value, "levels": self.levels}
        if self.tag is ColumnTag.ONEHOT_GROUP:
            return {
                "tag": self.tag.value,
                "group_name": self.group_name,
                "category_index": self.category_index,
            }
        return self.tag.value

    @classmethod
    def from_json(cls, payload: str | dict[str, Any]) -> ColumnKind:
        if isinstance(payload, str):
            return cls(tag=ColumnTag(payload))
        try:
            return cls(
                tag=ColumnTag(payload["tag"]),
                levels=payload.get("levels"),
                group_name=payload.get("group_name"),
                category_index=payload.get("category_index"),
            )
        except (KeyError, ValueError) as err:
            raise SchemaError(f"invalid column kind {payload!r}: {err}") from err


@dataclass(frozen=True)
class ColumnSpec:
    """One encoded output column and the raw column it is read from."""
    name: str
    kind: ColumnKind
    missing_policy: MissingPolicy = MissingPolicy.REJECT
    source: str | None = None

    @property
    def source_column(self) -> str:
        return self.source or self.name


@dataclass(frozen=True)
class Schema:
    """Ordered encoded columns plus the target definition."""
    columns: tuple[ColumnSpec, ...]
    target_name: str = TARGET_NAME

    def __post_init__(self) -> None:
        object.__setattr__(self, "columns", tuple(self.columns))
        names = [col.name for col in self.columns]
        if len(set(names)) != len(names):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise SchemaError(f"duplicate column names: {dupes}")
        if self.target_name in names:
            raise SchemaError(f"target {self.target_name!r} cannot also be a feature")

        groups: dict[str, list[int]] = {}
        for col in self.columns:
            if col.kind.tag is ColumnTag.ONEHOT_GROUP:
                groups.setdefault(col.kind.group_name, []).append(col.kind.category_index)
        for group, indices in groups.items():
            if len(set(indices)) != len(indices):
                raise SchemaError(f"onehot group {group!r} repeats a category_index")
            if indices != sorted(indices):
                raise SchemaError(f"onehot group {group!r} must be listed in category-index order")

    @property
    def feature_columns(self) -> tuple[ColumnSpec, ...]:
        """Columns that become Dataset features (z-scores and ids do not)."""
        return tuple(
            col for col in self.columns
            if col.kind.tag not in (ColumnTag.ZSCORE, ColumnTag.IDENTIFIER)
        )

    @property
    def feature_names(self) -> tuple[str, ...]:
        return tuple(col.name for col in self.feature_columns)

    def column(self, name: str) -> ColumnSpec:
        for col in self.columns:
            if col.name == name:
                return col
        raise SchemaError(f"unknown column {name!r}")

    def to_json(self) -> dict[str, Any]:
        return {
            "columns": [
                {
                    "name": col.name,
                    "kind": col.kind.to_json(),
                    "missing_policy": col.missing_policy.value,
                    **({"source": col.source} if col.source else {}),
                }
                for col in self.columns
            ],
            "target": self.target_name,
        }

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> Schema:
        try:
            columns = tuple(
                ColumnSpec(
                    name=item["name"],
                    kind=ColumnKind.from_json(item["kind"]),
                    missing_policy=MissingPolicy(item.get("missing_policy", "reject")),
                    source=item.get("source"),
                )
                for item in payload["columns"]
            )
        except (KeyError, TypeError, ValueError) as err:
            raise SchemaError(f"invalid schema document: {err}") from err
        return cls(columns=columns, target_name=payload.get("target", TARGET_NAME))


@dataclass(frozen=True)
class Dataset:
    """Encoded feature matrix, binary labels and column metadata."""
    features: np.ndarray
    labels: np.ndarray
    feature_names: tuple[str, ...]
    label_name: str = TARGET_NAME

    def __post_init__(self) -> None:
        features = np.array(self.features, dtype=np.float64, copy=True)
        labels = np.array(self.labels, copy=True)
        if features.ndim == 1:
            features = features.reshape(-1, 1)
        if features.ndim != 2:
            raise DatasetInvalid(f"features must be 2-D, got shape {features.shape}")
        if labels.ndim != 1 or labels.shape[0] != features.shape[0]:
            raise DatasetInvalid(
                f"labels length {labels.shape} does not match {features.shape[0]} rows"
            )
        if not np.all(np.isfinite(features)):
            raise DatasetInvalid("features contain NaN or infinite entries")
        if labels.size and not np.all(np.isin(labels, (0, 1))):
            raise DatasetInvalid("labels must be 0 or 1")
        names = tuple(self.feature_names)
        if len(names) != features.shape[1]:
            raise DatasetInvalid(
                f"{len(names)} feature names for {features.shape[1]} columns"
            )
        features.flags.writeable = False
        labels = labels.astype(np.int64)
        labels.flags.writeable = False
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "feature_names", names)

    @property
    def n_rows(self) -> int:
        return self.features.shape[0]

    @property
    def n_cols(self) -> int:
        return self.features.shape[1]

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean()) if self.n_rows else 0.0

    def subset(self, indices: Sequence[int] | np.ndarray) -> Dataset:
        """Rows at the given indices, in that order."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.feature_names, self.label_name)

    def select(self, names: Sequence[str]) -> Dataset:
        """Columns with the given names, in that order."""
        missing = [name for name in names if name not in self.feature_names]
        if missing:
            raise DatasetInvalid(f"unknown features: {missing}")
        cols = [self.feature_names.index(name) for name in names]
        return Dataset(self.features[:, cols], self.labels, tuple(names), self.label_name)

    def with_features(self, features: np.ndarray, names: Sequence[str] | None = None) -> Dataset:
        return Dataset(features, self.labels, tuple(names or self.feature_names), self.label_name)

    def fingerprint(self) -> str:
        """SHA-256 over names, features and labels."""
        digest = hashlib.sha256()
        digest.update("\x1f".join(self.feature_names).encode())
        digest.update(np.ascontiguousarray(self.features).tobytes())
        digest.update(np.ascontiguousarray(self.labels).tobytes())
        return digest.hexdigest()

    def to_frame(self) -> pd.DataFrame:
        frame = pd.DataFrame(self.features, columns=list(self.feature_names))
        frame[self.label_name] = self.labels
        return frame

    def to_csv(self, path: str | Path) -> Path:
        """Write header + numeric CSV and the sidecar JSON next to it."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
        sidecar = sidecar_path(path)
        sidecar.write_text(
            json.dumps(
                {"feature_names": list(self.feature_names), "label": self.label_name},
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )
        _LOGGER.info("Wrote dataset %s (%d rows, %d features)", path, self.n_rows, self.n_cols)
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> Dataset:
        path = Path(path)
        frame = pd.read_csv(path)
        sidecar = sidecar_path(path)
        if sidecar.exists():
            meta = json.loads(sidecar.read_text(encoding="utf-8"))
            names = meta["feature_names"]
            label = meta.get("label", TARGET_NAME)
        else:
            label = TARGET_NAME if TARGET_NAME in frame.columns else frame.columns[-1]
            names = [col for col in frame.columns if col != label]
        missing = [col for col in [*names, label] if col not in frame.columns]
        if missing:
            raise DatasetInvalid(f"{path} lacks columns {missing}")
        return cls(
            frame[names].to_numpy(dtype=np.float64),
            frame[label].to_numpy(),
            tuple(names),
            label,
        )


def sidecar_path(path: Path) -> Path:
    """JSON metadata file stored next to a dataset CSV."""
    return path.with_suffix(".json")


@dataclass(frozen=True)
class SplitPlan:
    """Stratified train/test partition of row indices."""
    train_indices: np.ndarray
    test_indices: np.ndarray
    seed: int
    ratio: float

    def apply(self, dataset: Dataset) -> tuple[Dataset, Dataset]:
        return dataset.subset(self.train_indices), dataset.subset(self.test_indices)

    def to_json(self) -> dict[str, Any]:
        return {
            "train_indices": self.train_indices.tolist(),
            "test_indices": self.test_indices.tolist(),
            "seed": self.seed,
            "ratio": self.ratio,
        }


@dataclass(frozen=True)
class FoldPlan:
    """Per-row fold assignment for stratified k-fold cross-validation."""
    k: int
    fold_assignments: np.ndarray
    seed: int

    def fold_sizes(self) -> np.ndarray:
        return np.bincount(self.fold_assignments, minlength=self.k)

    def folds(self) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Yield (train_indices, test_indices) for each fold in order."""
        for fold in range(self.k):
            in_fold = self.fold_assignments == fold
            yield np.flatnonzero(~in_fold), np.flatnonzero(in_fold)


def _round_half_up(value: float) -> int:
    return int(math.floor(value + 0.5))


def _class_indices(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    positives = np.flatnonzero(dataset.labels == 1)
    negatives = np.flatnonzero(dataset.labels == 0)
    return positives, negatives


def split_stratified(
    dataset: Dataset,
    ratio: float = DEFAULT_TRAIN_RATIO,
    seed: int = DEFAULT_SEED,
) -> SplitPlan:
    """
    Split rows into train/test keeping the class balance of the full data.

    Args:
        dataset: Dataset to split
        ratio: Share of rows that go to the training side, in (0, 1)
        seed: Seed for the within-class shuffles

    Returns:
        SplitPlan whose per-side positive share is within half a row of
        the full-data share
    """
    if not 0.0 < ratio < 1.0:
        raise RatioOutOfRange(f"ratio must be in (0, 1), got {ratio}")
    positives, negatives = _class_indices(dataset)
    if positives.size == 0 or negatives.size == 0:
        raise SingleClassDataset("both classes must be present to stratify")

    rng = np.random.default_rng(seed)
    n_rows = dataset.n_rows
    n_train = min(max(_round_half_up(ratio * n_rows), 1), n_rows - 1)
    pos_train = _round_half_up(positives.size * n_train / n_rows)
    pos_train = min(max(pos_train, n_train - negatives.size, 0), positives.size, n_train)
    neg_train = n_train - pos_train

    pos_order = rng.permutation(positives)
    neg_order = rng.permutation(negatives)
    train = np.concatenate([pos_order[:pos_train], neg_order[:neg_train]])
    test = np.concatenate([pos_order[pos_train:], neg_order[neg_train:]])
    plan = SplitPlan(
        train_indices=rng.permutation(train),
        test_indices=rng.permutation(test),
        seed=seed,
        ratio=ratio,
    )
    _LOGGER.debug(
        "Stratified split seed=%s ratio=%s: %d train (%d pos), %d test",
        seed, ratio, train.size, pos_train, test.size,
    )
    return plan


def kfold_stratified(dataset: Dataset, k: int = DEFAULT_FOLDS, seed: int = DEFAULT_SEED) -> FoldPlan:
    """
    Assign rows to k folds, spreading each class round-robin over the folds.

    Leave-one-out (k equal to the row count) is accepted regardless of
    class sizes; otherwise every class needs at least k members.
    """
    if k < 2:
        raise TooFewPerClass(f"k must be >= 2, got {k}")
    positives, negatives = _class_indices(dataset)
    leave_one_out = k == dataset.n_rows
    if not leave_one_out and (positives.size < k or negatives.size < k):
        raise TooFewPerClass(
            f"k={k} folds need >= {k} rows per class "
            f"(have {positives.size} positive, {negatives.size} negative)"
        )
    if k > dataset.n_rows:
        raise TooFewPerClass(f"k={k} exceeds {dataset.n_rows} rows")

    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(positives), rng.permutation(negatives)])
    assignments = np.empty(dataset.n_rows, dtype=np.int64)
    assignments[order] = np.arange(order.size) % k
    return FoldPlan(k=k, fold_assignments=assignments, seed=seed)


class TrainedModel(ABC):
    """Uniform probabilistic binary classifier artifact."""

    kind: ClassVar[str] = "abstract"
    n_features: int

    @abstractmethod
    def score(self, features: np.ndarray) -> np.ndarray:
        """Probability of class 1 for each row."""

    def predict(self, features: np.ndarray, threshold: float = DECISION_THRESHOLD) -> np.ndarray:
        """Class 1 when the score reaches the threshold (ties go to class 1)."""
        return (self.score(features) >= threshold).astype(np.int64)

    @abstractmethod
    def to_dict(self) -> dict[str, Any]:
        """JSON-ready parameters, tagged with the model kind."""

    @classmethod
    @abstractmethod
    def from_dict(cls, payload: dict[str, Any]) -> TrainedModel:
        """Inverse of to_dict."""

    def _check_width(self, features: np.ndarray) -> np.ndarray:
        rows = np.asarray(features, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows.reshape(1, -1)
        if rows.shape[1] != self.n_features:
            raise DimensionMismatch(
                f"{self.kind} expects {self.n_features} features, got {rows.shape[1]}"
            )
        return rows

