"""
Survey preprocessing: label derivation, missing-value recoding and encoding.

Turns raw survey rows (one child per row, strings as read from CSV) into the
encoded Dataset. The rules live in the schema document bundled under
nutriscreen/data/default_schema.json.
"""
from __future__ import annotations

import json
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from importlib import resources
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from .const import (
    MISSING_TOKENS,
    NOT_ASKED,
    NOT_ASKED_CODE,
    NOT_ASKED_TOKENS,
    TARGET_NAME,
    ZSCORE_COLUMNS,
    ZSCORE_CUTOFF,
    ZSCORE_REJECT_LIMIT,
    ZSCORE_WARN_LIMIT,
)
from .data_model import ColumnTag, Dataset, MissingPolicy, Schema
from .errors import (
    AllMissingColumn,
    ImplausibleZScore,
    MissingValueRejected,
    SchemaError,
    SchemaMismatch,
    StatsDimensionMismatch,
    UnknownCategory,
)

_LOGGER = logging.getLogger(__name__)

SCHEMA_RESOURCE = "default_schema.json"


# =============================================================================
# Label derivation
# =============================================================================

@dataclass(frozen=True)
class AnthroRecord:
    """Anthropometric z-scores of one child."""
    waz: float
    haz: float
    whz: float


@dataclass(frozen=True)
class MalnutritionLabel:
    """Component and composite undernutrition flags."""
    underweight: bool
    stunted: bool
    wasted: bool

    @property
    def malnourished(self) -> bool:
        return self.underweight or self.stunted or self.wasted


def check_plausible(rec: AnthroRecord) -> None:
    """Raise on non-finite or out-of-window z-scores, warn on flagged ones."""
    for name in ZSCORE_COLUMNS:
        value = getattr(rec, name)
        if not math.isfinite(value) or abs(value) > ZSCORE_REJECT_LIMIT:
            raise ImplausibleZScore(f"{name}={value} outside [-{ZSCORE_REJECT_LIMIT}, {ZSCORE_REJECT_LIMIT}]")
        if abs(value) > ZSCORE_WARN_LIMIT:
            _LOGGER.warning("Flagged %s=%s beyond +/-%s", name, value, ZSCORE_WARN_LIMIT)


def derive_label(rec: AnthroRecord) -> MalnutritionLabel:
    """
    Classify one child from its z-scores.

    A component is flagged strictly below the cutoff, so -2.0 itself counts
    as nourished.

    Args:
        rec: Weight-for-age, height-for-age and weight-for-height z-scores

    Returns:
        MalnutritionLabel with the three components
    """
    check_plausible(rec)
    return MalnutritionLabel(
        underweight=rec.waz < ZSCORE_CUTOFF,
        stunted=rec.haz < ZSCORE_CUTOFF,
        wasted=rec.whz < ZSCORE_CUTOFF,
    )


def zscore_frame(raw: pd.DataFrame) -> pd.DataFrame:
    """Numeric z-score columns of a raw table, validated row-wise."""
    missing = [col for col in ZSCORE_COLUMNS if col not in raw.columns]
    if missing:
        raise SchemaMismatch(f"raw table lacks z-score columns {missing}")
    frame = pd.DataFrame(index=raw.index)
    for col in ZSCORE_COLUMNS:
        text = raw[col].astype(str).str.strip()
        gaps = raw[col].isna() | text.isin(MISSING_TOKENS)
        if gaps.any():
            rows = list(raw.index[gaps][:5])
            raise MissingValueRejected(f"{col} missing for rows {rows}")
        try:
            frame[col] = pd.to_numeric(text).astype(np.float64)
        except (TypeError, ValueError) as err:
            raise ImplausibleZScore(f"{col} holds non-numeric values: {err}") from err

    values = frame.to_numpy()
    bad = ~np.isfinite(values) | (np.abs(values) > ZSCORE_REJECT_LIMIT)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ImplausibleZScore(
            f"{ZSCORE_COLUMNS[col]}={values[row, col]} in row {frame.index[row]} "
            f"outside [-{ZSCORE_REJECT_LIMIT}, {ZSCORE_REJECT_LIMIT}]"
        )
    flagged = int((np.abs(values) > ZSCORE_WARN_LIMIT).any(axis=1).sum())
    if flagged:
        _LOGGER.warning("%d rows carry z-scores beyond +/-%s", flagged, ZSCORE_WARN_LIMIT)
    return frame


def derive_labels(raw: pd.DataFrame) -> pd.DataFrame:
    """Vectorised derive_label over a raw table; returns 0/1 component columns."""
    scores = zscore_frame(raw)
    labels = pd.DataFrame(
        {
            "underweight": (scores["waz"] < ZSCORE_CUTOFF).astype(np.int64),
            "stunted": (scores["haz"] < ZSCORE_CUTOFF).astype(np.int64),
            "wasted": (scores["whz"] < ZSCORE_CUTOFF).astype(np.int64),
        },
        index=raw.index,
    )
    labels[TARGET_NAME] = labels.max(axis=1)
    return labels


# =============================================================================
# Missing values
# =============================================================================

def normalize_token(value: Any) -> str | None:
    """Canonical raw token: stripped lower-case text, integers without '.0'."""
    if value is None:
        return None
    if isinstance(value, float) and math.isnan(value):
        return None
    text = str(value).strip()
    if text in MISSING_TOKENS:
        return None
    try:
        number = float(text)
    except ValueError:
        return text.lower()
    if number.is_integer():
        return str(int(number))
    return text


def _is_not_asked(token: str | None) -> bool:
    return token is not None and token in NOT_ASKED_TOKENS


def recode_missing(
    values: Iterable[Any],
    policy: MissingPolicy | str,
    rule: EncodingRule | None = None,
) -> list[Any]:
    """
    Apply a missing-value policy to one raw column.

    Args:
        values: Raw cells; None, NaN, "" and "NA" count as missing
        policy: mode_impute, not_asked_recode or reject
        rule: Encoding rule used to break mode ties by encoded value

    Returns:
        New list of cells with missing entries resolved
    """
    policy = MissingPolicy(policy)
    cells = list(values)
    tokens = [normalize_token(v) for v in cells]

    if policy is MissingPolicy.NOT_ASKED_RECODE:
        return [
            NOT_ASKED if tok is None or _is_not_asked(tok) else cell
            for cell, tok in zip(cells, tokens)
        ]

    missing = [tok is None or _is_not_asked(tok) for tok in tokens]
    if policy is MissingPolicy.REJECT:
        if any(missing):
            first = missing.index(True)
            raise MissingValueRejected(f"missing value at position {first}")
        return cells

    observed = [cell for cell, gap in zip(cells, missing) if not gap]
    if not observed:
        raise AllMissingColumn("mode is undefined: no observed values")
    counts = pd.Series([normalize_token(cell) for cell in observed]).value_counts()
    top = counts[counts == counts.max()].index.tolist()

    def encoded(token: str) -> float:
        if rule is not None:
            return float(rule.code_of(token))
        try:
            return float(token)
        except ValueError:
            return math.inf

    mode_token = min(top, key=lambda tok: (encoded(tok), tok))
    mode_cell = next(cell for cell in observed if normalize_token(cell) == mode_token)
    if any(missing):
        _LOGGER.debug("Imputed %d cells with mode %r", sum(missing), mode_cell)
    return [mode_cell if gap else cell for cell, gap in zip(cells, missing)]


# =============================================================================
# Encoding rules
# =============================================================================

class RuleKind(StrEnum):
    """Encoding rule for one raw column."""
    ORDINAL_PASSTHROUGH = "ordinal_passthrough"
    TERNARY_YES_NO_NOTASKED = "ternary_yes_no_notasked"
    BINARY_01 = "binary_01"
    ONEHOT = "onehot"
    COLLAPSE_SAFE_UNSAFE = "collapse_safe_unsafe"
    MODE_IMPUTE_THEN_BINARY = "mode_impute_then_binary"


_DEFAULT_CATEGORIES = {
    RuleKind.TERNARY_YES_NO_NOTASKED: ("no", "yes"),
    RuleKind.BINARY_01: ("no", "yes"),
    RuleKind.MODE_IMPUTE_THEN_BINARY: ("no", "yes"),
}
SAFE = "safe"
UNSAFE = "unsafe"


@dataclass(frozen=True)
class EncodingRule:
    """How one raw column maps to integer codes."""
    kind: RuleKind
    categories: tuple[str, ...] = ()
    start: int = 0
    reference: str | None = None
    safe_set: frozenset[str] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", RuleKind(self.kind))
        categories = tuple(str(c).lower() for c in self.categories) or _DEFAULT_CATEGORIES.get(self.kind, ())
        object.__setattr__(self, "categories", categories)
        object.__setattr__(self, "safe_set", frozenset(str(c).lower() for c in self.safe_set))
        if len(set(categories)) != len(categories):
            raise SchemaError(f"{self.kind} rule repeats a category")
        if self.kind in (RuleKind.BINARY_01, RuleKind.MODE_IMPUTE_THEN_BINARY, RuleKind.TERNARY_YES_NO_NOTASKED):
            if len(categories) != 2:
                raise SchemaError(f"{self.kind} rule needs exactly two categories")
        if self.kind is RuleKind.ORDINAL_PASSTHROUGH and len(categories) < 2:
            raise SchemaError("ordinal rule needs at least two categories")
        if self.kind is RuleKind.ONEHOT:
            if self.reference is None or self.reference.lower() not in categories:
                raise SchemaError("onehot rule needs a reference among its categories")
            object.__setattr__(self, "reference", self.reference.lower())
        if self.kind is RuleKind.COLLAPSE_SAFE_UNSAFE:
            if not self.safe_set or not self.safe_set <= set(categories):
                raise SchemaError("collapse rule needs a non-empty safe_set drawn from its categories")

    @property
    def allows_not_asked(self) -> bool:
        return self.kind in (
            RuleKind.ORDINAL_PASSTHROUGH,
            RuleKind.TERNARY_YES_NO_NOTASKED,
            RuleKind.COLLAPSE_SAFE_UNSAFE,
        )

    def code_of(self, value: Any) -> int:
        """Integer code of a raw value (onehot: category index)."""
        token = normalize_token(value)
        if (token == NOT_ASKED or _is_not_asked(token)) and self.allows_not_asked:
            return NOT_ASKED_CODE
        if token not in self.categories:
            raise UnknownCategory(f"{value!r} not in {self.kind} categories {list(self.categories)}")
        index = self.categories.index(token)
        if self.kind is RuleKind.ORDINAL_PASSTHROUGH:
            return self.start + index
        if self.kind is RuleKind.COLLAPSE_SAFE_UNSAFE:
            return int(token in self.safe_set)
        return index

    def encode(self, values: Sequence[Any]) -> np.ndarray:
        return np.array([self.code_of(v) for v in values], dtype=np.int64)

    def decode(self, code: int) -> str:
        """Raw category for a code; collapse rules return safe/unsafe."""
        code = int(code)
        if code == NOT_ASKED_CODE and self.allows_not_asked:
            return NOT_ASKED
        if self.kind is RuleKind.COLLAPSE_SAFE_UNSAFE:
            return SAFE if code == 1 else UNSAFE
        index = code - self.start if self.kind is RuleKind.ORDINAL_PASSTHROUGH else code
        if not 0 <= index < len(self.categories):
            raise UnknownCategory(f"code {code} has no {self.kind} category")
        return self.categories[index]

    def to_json(self) -> dict[str, Any]:
        payload: dict[str, Any] = {"rule": self.kind.value, "categories": list(self.categories)}
        if self.kind is RuleKind.ORDINAL_PASSTHROUGH:
            payload["start"] = self.start
        if self.reference is not None:
            payload["reference"] = self.reference
        if self.safe_set:
            payload["safe_set"] = sorted(self.safe_set)
        return payload

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> EncodingRule:
        try:
            return cls(
                kind=RuleKind(payload["rule"]),
                categories=tuple(payload.get("categories", ())),
                start=int(payload.get("start", 0)),
                reference=payload.get("reference"),
                safe_set=frozenset(payload.get("safe_set", ())),
            )
        except (KeyError, ValueError) as err:
            raise SchemaError(f"invalid encoding rule {dict(payload)!r}: {err}") from err


@dataclass(frozen=True)
class EncodingSpec:
    """Encoding rule per raw source column."""
    rules: Mapping[str, EncodingRule] = field(default_factory=dict)

    def rule_for(self, source: str) -> EncodingRule:
        try:
            return self.rules[source]
        except KeyError:
            raise SchemaMismatch(f"no encoding rule for column {source!r}") from None

    def to_json(self) -> dict[str, Any]:
        return {name: rule.to_json() for name, rule in self.rules.items()}

    @classmethod
    def from_json(cls, payload: Mapping[str, Any]) -> EncodingSpec:
        return cls(rules={name: EncodingRule.from_json(item) for name, item in payload.items()})


# Rule kinds a column kind can be produced by
_COMPATIBLE = {
    ColumnTag.ORDINAL: {RuleKind.ORDINAL_PASSTHROUGH},
    ColumnTag.BINARY: {RuleKind.BINARY_01, RuleKind.MODE_IMPUTE_THEN_BINARY, RuleKind.COLLAPSE_SAFE_UNSAFE},
    ColumnTag.TERNARY: {RuleKind.TERNARY_YES_NO_NOTASKED, RuleKind.COLLAPSE_SAFE_UNSAFE},
    ColumnTag.ONEHOT_GROUP: {RuleKind.ONEHOT},
}


def load_schema(path: str | Path | None = None) -> tuple[Schema, EncodingSpec]:
    """Read a schema document (the bundled default when path is None)."""
    if path is None:
        text = (resources.files("nutriscreen") / "data" / SCHEMA_RESOURCE).read_text(encoding="utf-8")
        origin = f"bundled {SCHEMA_RESOURCE}"
    else:
        text = Path(path).read_text(encoding="utf-8")
        origin = str(path)
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as err:
        raise SchemaError(f"{origin} is not valid JSON: {err}") from err
    schema = Schema.from_json(payload)
    encodings = EncodingSpec.from_json(payload.get("encodings", {}))
    _LOGGER.debug("Loaded schema from %s: %d columns", origin, len(schema.columns))
    return schema, encodings


def save_schema(schema: Schema, encodings: EncodingSpec, path: str | Path) -> None:
    payload = schema.to_json()
    payload["encodings"] = encodings.to_json()
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")


def read_survey_csv(path: str | Path) -> pd.DataFrame:
    """Raw survey table with every cell kept as text."""
    return pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")


def _source_groups(schema: Schema) -> dict[str, list[int]]:
    groups: dict[str, list[int]] = {}
    for position, col in enumerate(schema.feature_columns):
        groups.setdefault(col.source_column, []).append(position)
    return groups


def _labels_for(raw: pd.DataFrame, schema: Schema) -> np.ndarray:
    if all(col in raw.columns for col in ZSCORE_COLUMNS):
        return derive_labels(raw)[TARGET_NAME].to_numpy()
    if schema.target_name in raw.columns:
        tokens = [normalize_token(v) for v in raw[schema.target_name]]
        if any(tok not in ("0", "1") for tok in tokens):
            raise SchemaMismatch(f"target column {schema.target_name!r} must hold 0/1")
        return np.array([int(tok) for tok in tokens], dtype=np.int64)
    raise SchemaMismatch(
        f"raw table has neither z-score columns {list(ZSCORE_COLUMNS)} nor {schema.target_name!r}"
    )


def encode(raw: pd.DataFrame, schema: Schema, encodings: EncodingSpec) -> Dataset:
    """
    Encode a raw survey table into a Dataset.

    Args:
        raw: One row per child, cells as text
        schema: Encoded output columns in order
        encodings: Rule per raw source column

    Returns:
        Dataset whose columns follow schema order
    """
    labels = _labels_for(raw, schema)
    features = encode_features(raw, schema, encodings)
    dataset = Dataset(features, labels, schema.feature_names, schema.target_name)
    _LOGGER.info(
        "Encoded %d rows into %d features (prevalence %.4f)",
        dataset.n_rows, dataset.n_cols, dataset.prevalence,
    )
    return dataset


def encode_features(raw: pd.DataFrame, schema: Schema, encodings: EncodingSpec) -> np.ndarray:
    """Encoded feature matrix of a raw table, without label handling."""
    columns = schema.feature_columns
    features = np.zeros((len(raw), len(columns)), dtype=np.float64)

    for source, positions in _source_groups(schema).items():
        if source not in raw.columns:
            raise SchemaMismatch(f"raw table lacks column {source!r}")
        rule = encodings.rule_for(source)
        first = columns[positions[0]]
        for position in positions:
            tag = columns[position].kind.tag
            if rule.kind not in _COMPATIBLE.get(tag, set()):
                raise SchemaMismatch(f"{rule.kind} cannot produce {tag} column {columns[position].name!r}")
        if rule.kind is RuleKind.MODE_IMPUTE_THEN_BINARY and first.missing_policy is not MissingPolicy.MODE_IMPUTE:
            raise SchemaMismatch(f"{source!r} uses mode_impute_then_binary without mode_impute policy")

        cells = recode_missing(raw[source].tolist(), first.missing_policy, rule)
        codes = rule.encode(cells)

        if rule.kind is RuleKind.ONEHOT:
            for position in positions:
                col = columns[position]
                category = rule.categories[col.kind.category_index]
                if category == rule.reference:
                    raise SchemaMismatch(f"reference category {category!r} cannot have an indicator column")
                features[:, position] = codes == col.kind.category_index
            continue

        col = columns[positions[0]]
        allowed = col.kind.allowed_values
        if allowed is not None and not set(np.unique(codes)) <= allowed:
            raise SchemaMismatch(f"{col.name!r} produced codes outside {sorted(allowed)}")
        if col.kind.tag is ColumnTag.ORDINAL and col.kind.levels != len(rule.categories):
            raise SchemaMismatch(
                f"{col.name!r} declares {col.kind.levels} levels but its rule has {len(rule.categories)}"
            )
        features[:, positions[0]] = codes
    return features


def decode(dataset: Dataset, schema: Schema, encodings: EncodingSpec) -> pd.DataFrame:
    """Raw categories back from an encoded Dataset (collapse rules are lossy)."""
    if dataset.feature_names != schema.feature_names:
        raise SchemaMismatch("dataset columns differ from schema columns")
    columns = schema.feature_columns
    raw: dict[str, list[str]] = {}
    for source, positions in _source_groups(schema).items():
        rule = encodings.rule_for(source)
        if rule.kind is RuleKind.ONEHOT:
            reference = rule.categories.index(rule.reference)
            indices = np.full(dataset.n_rows, reference, dtype=np.int64)
            for position in positions:
                hot = dataset.features[:, position] == 1
                indices[hot] = columns[position].kind.category_index
            raw[source] = [rule.categories[i] for i in indices]
        else:
            raw[source] = [rule.decode(code) for code in dataset.features[:, positions[0]]]
    frame = pd.DataFrame(raw)
    frame[dataset.label_name] = dataset.labels
    return frame


# =============================================================================
# Standardization
# =============================================================================

@dataclass(frozen=True)
class Standardizer:
    """Per-column train-time location and scale."""
    mean: np.ndarray
    scale: np.ndarray

    def transform(self, features: np.ndarray) -> np.ndarray:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim == 1:
            features = features.reshape(1, -1)
        if features.shape[1] != self.mean.shape[0]:
            raise StatsDimensionMismatch(
                f"stats cover {self.mean.shape[0]} columns, data has {features.shape[1]}"
            )
        return (features - self.mean) / self.scale

    def to_dict(self) -> dict[str, Any]:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, payload: Mapping[str, Any]) -> Standardizer:
        return cls(np.asarray(payload["mean"], dtype=np.float64), np.asarray(payload["scale"], dtype=np.float64))


def fit_standardizer(features: np.ndarray) -> Standardizer:
    """Population mean/SD per column; zero-SD columns pass through unscaled."""
    features = np.asarray(features, dtype=np.float64)
    mean = features.mean(axis=0)
    std = features.std(axis=0)
    constant = std == 0
    return Standardizer(np.where(constant, 0.0, mean), np.where(constant, 1.0, std))


def standardize(dataset: Dataset, stats: Standardizer | None = None) -> tuple[Dataset, Standardizer]:
    """
    Standardize features with train-time statistics.

    Without stats the statistics are fitted on this dataset; with stats they
    are only applied.
    """
    if stats is None:
        stats = fit_standardizer(dataset.features)
    return dataset.with_features(stats.transform(dataset.features)), stats


# =============================================================================
# Descriptives
# =============================================================================

def province_prevalence(raw: pd.DataFrame, column: str = "province") -> pd.DataFrame:
    """Per-province child counts and component/composite undernutrition rates."""
    if column not in raw.columns:
        raise SchemaMismatch(f"raw table lacks column {column!r}")
    labels = derive_labels(raw)
    labels[column] = [normalize_token(v) for v in raw[column]]
    grouped = labels.groupby(column, sort=True)
    table = grouped[["underweight", "stunted", "wasted", TARGET_NAME]].mean()
    table.insert(0, "n", grouped.size())
    return table.reset_index().rename(columns={column: "province"})
