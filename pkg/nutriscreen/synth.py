"""
Synthetic survey generator.

Produces raw survey tables whose per-feature category shares and
per-category malnutrition rates follow the published descriptive table of
the 2019 Nepal survey sample (6,416 children), so the whole pipeline can run
without the microdata. A planted-signal mode replaces the label model with a
logistic function of the encoded features.
"""
from __future__ import annotations

import logging
from collections.abc import Mapping
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import optimize, special

from .const import (
    DEFAULT_SYNTH_ROWS,
    DEFAULT_SYNTH_SEED,
    MALNOURISHED_COUNT,
    NOT_ASKED,
    PREVALENCE_TOLERANCE,
    STUNTED_RATE,
    UNDERWEIGHT_RATE,
    WASTED_RATE,
    ZSCORE_COLUMNS,
)
from .data_model import Dataset, Schema
from .errors import InvalidHyperparameter, SchemaError
from .preprocess import EncodingSpec, encode_features, load_schema

_LOGGER = logging.getLogger(__name__)

DEFAULT_STRATIFIER = "wealth_index"
MODE_MARGINAL = "marginal"
MODE_PLANTED = "planted"


@dataclass(frozen=True)
class FeatureMarginal:
    """Category weights and per-category malnutrition rate of one raw column."""
    categories: tuple[str, ...]
    weights: tuple[float, ...]
    rates: tuple[float, ...]

    def __post_init__(self) -> None:
        if not (len(self.categories) == len(self.weights) == len(self.rates)):
            raise SchemaError("categories, weights and rates differ in length")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise SchemaError("category weights must be non-negative with a positive total")
        if any(not 0.0 <= r <= 1.0 for r in self.rates):
            raise SchemaError("conditional rates must lie in [0, 1]")

    @property
    def probabilities(self) -> np.ndarray:
        weights = np.asarray(self.weights, dtype=np.float64)
        return weights / weights.sum()

    def conditional(self, label: int) -> np.ndarray:
        """Category distribution given the label, by Bayes on the table."""
        rates = np.asarray(self.rates, dtype=np.float64)
        joint = self.probabilities * (rates if label == 1 else 1.0 - rates)
        return joint / joint.sum()

    @property
    def implied_prevalence(self) -> float:
        return float(self.probabilities @ np.asarray(self.rates))


def _from_counts(rows: list[tuple[str, float, float]]) -> FeatureMarginal:
    """(category, children, malnourished) rows to a FeatureMarginal."""
    return FeatureMarginal(
        categories=tuple(cat for cat, _, _ in rows),
        weights=tuple(float(total) for _, total, _ in rows),
        rates=tuple(mal / total for _, total, mal in rows),
    )


@dataclass(frozen=True)
class MarginalSpec:
    """Per-column marginals of a survey sample plus its size."""
    features: Mapping[str, FeatureMarginal]
    stratifier: str = DEFAULT_STRATIFIER
    n_default: int = DEFAULT_SYNTH_ROWS

    def __post_init__(self) -> None:
        if self.stratifier not in self.features:
            raise SchemaError(f"stratifier {self.stratifier!r} has no marginal")
        for name, marginal in self.features.items():
            if abs(marginal.probabilities.sum() - 1.0) > 1e-9:
                raise SchemaError(f"{name} category probabilities do not sum to 1")

    @property
    def prevalence(self) -> float:
        """Overall malnutrition rate implied by the stratifier."""
        return self.features[self.stratifier].implied_prevalence

    def rate(self, feature: str, category: str) -> float:
        marginal = self.features[feature]
        return marginal.rates[marginal.categories.index(category)]


def builtin_marginals() -> MarginalSpec:
    """Marginals transcribed from the survey's descriptive table (n = 6,416)."""
    # Provinces without their own rows share the remaining children equally
    rest_children = 6416 - 947 - 711 - 743 - 822
    rest_cases = MALNOURISHED_COUNT - 345 - 229 - 433 - 427
    share = rest_children / 3
    cases = rest_cases / 3

    features = {
        "mother_education": _from_counts([
            ("none", 1571, 838), ("primary", 2028, 927),
            ("secondary", 2337, 845), ("higher", 480, 135),
        ]),
        "wealth_index": _from_counts([
            ("poorest", 1832, 992), ("poorer", 1317, 569), ("middle", 1275, 526),
            ("richer", 1170, 442), ("richest", 822, 216),
        ]),
        "vaccination_record": _from_counts([
            ("no_document", 1012, 488), ("card_seen", 2557, 985), (NOT_ASKED, 2847, 1272),
        ]),
        "health_insurance": _from_counts([("no", 6126, 2661), ("yes", 290, 84)]),
        "residence": _from_counts([("urban", 2855, 1352), ("rural", 3561, 1393)]),
        "left_alone": _from_counts([
            ("0", 5020, 2075), ("1", 155, 74), ("2", 253, 112), ("3", 136, 65),
            ("4", 116, 48), ("5", 111, 65), ("6", 57, 24), ("7", 526, 259),
            (NOT_ASKED, 42, 23),
        ]),
        "away_privileges": _from_counts([
            ("no", 3292, 1438), ("yes", 2071, 975), (NOT_ASKED, 1053, 332),
        ]),
        "child_age": _from_counts([
            ("0", 1044, 327), ("1", 1270, 577), ("2", 1259, 571),
            ("3", 1478, 687), ("4", 1365, 583),
        ]),
        "recent_diarrhoea": _from_counts([("no", 5761, 2426), ("yes", 655, 319)]),
        "recent_cough": _from_counts([("no", 5028, 2165), ("yes", 1388, 580)]),
        "province": _from_counts([
            ("bagmati", share, cases), ("koshi", 947, 345), ("madhesh", share, cases),
            ("gandaki", 711, 229), ("lumbini", share, cases), ("karnali", 743, 433),
            ("sudoorpaschim", 822, 427),
        ]),
        "meal_frequency": _from_counts([
            ("0", 529, 170), ("1", 93, 40), ("2", 410, 154), ("3", 527, 235),
            ("4", 411, 171), ("5", 200, 89), ("6", 97, 31), ("7", 32, 9),
            (NOT_ASKED, 4117, 1846),
        ]),
        "safe_stool_disposal": _from_counts([
            ("left_in_open", 926, 446), ("put_in_toilet", 2644, 1029), (NOT_ASKED, 2846, 1270),
        ]),
    }
    return MarginalSpec(features=features)


@dataclass(frozen=True)
class SignalSpec:
    """Logistic label model over encoded feature codes."""
    coefficients: Mapping[str, float]
    intercept: float | None = None
    target_prevalence: float = MALNOURISHED_COUNT / DEFAULT_SYNTH_ROWS

    def logits(self, codes: np.ndarray, names: tuple[str, ...], intercept: float) -> np.ndarray:
        unknown = [name for name in self.coefficients if name not in names]
        if unknown:
            raise SchemaError(f"signal names unknown features {unknown}")
        weights = np.array([self.coefficients.get(name, 0.0) for name in names])
        return intercept + codes @ weights


def default_signal(strength: str = "moderate") -> SignalSpec:
    """Signal whose directions follow the descriptive table; 'strong' doubles it."""
    scale = {"moderate": 1.0, "strong": 2.0}.get(strength)
    if scale is None:
        raise InvalidHyperparameter(f"unknown signal strength {strength!r}")
    base = {
        "mother_education": -0.35,
        "wealth_index": -0.30,
        "child_age": 0.15,
        "karnali": 0.60,
        "sudoorpaschim": 0.35,
        "gandaki": -0.40,
        "koshi": -0.25,
        "vaccination_record": -0.20,
        "health_insurance": -0.45,
        "recent_diarrhoea": 0.25,
        "left_alone": 0.05,
    }
    return SignalSpec(coefficients={name: coef * scale for name, coef in base.items()})


def calibrate_intercept(logits_without_intercept: np.ndarray, target: float) -> float:
    """Intercept whose mean logistic probability equals the target."""
    if not 0.0 < target < 1.0:
        raise InvalidHyperparameter(f"target prevalence must be in (0, 1), got {target}")

    def gap(intercept: float) -> float:
        return float(special.expit(logits_without_intercept + intercept).mean() - target)

    return float(optimize.brentq(gap, -50.0, 50.0, xtol=1e-10))


# =============================================================================
# Z-scores consistent with the label
# =============================================================================

def component_rates_given_malnourished(
    prevalence: float = MALNOURISHED_COUNT / DEFAULT_SYNTH_ROWS,
) -> np.ndarray:
    """Share of malnourished children flagged underweight, stunted and wasted."""
    return np.array([UNDERWEIGHT_RATE, STUNTED_RATE, WASTED_RATE]) / prevalence


def flag_probabilities(target: np.ndarray) -> np.ndarray:
    """
    Independent flag probabilities that, conditioned on at least one flag,
    give the target conditional shares.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.sum() <= 1.0:
        return np.clip(target, 0.0, 1.0)

    def gap(z: float) -> float:
        return float(1.0 - np.prod(1.0 - target * z) - z)

    upper = min(1.0, 1.0 / target.max())
    z = optimize.brentq(gap, 1e-9, upper)
    return target * z


def draw_zscores(labels: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """WAZ/HAZ/WHZ per row; a component is below -2 exactly when flagged."""
    n = labels.shape[0]
    flags = np.zeros((n, 3), dtype=bool)
    probs = flag_probabilities(component_rates_given_malnourished())
    pending = np.flatnonzero(labels == 1)
    while pending.size:
        draw = rng.random((pending.size, 3)) < probs
        flags[pending] = draw
        pending = pending[~draw.any(axis=1)]

    normal = np.clip(rng.normal(-0.6, 0.9, size=(n, 3)), -1.99, 3.0)
    low = np.maximum(-2.05 - rng.exponential(0.8, size=(n, 3)), -5.9)
    return np.round(np.where(flags, low, normal), 2)


# =============================================================================
# Generation
# =============================================================================

def _draw_category(probs: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.choice(probs.shape[0], size=size, p=probs)


def generate(
    spec: MarginalSpec | None = None,
    signal: SignalSpec | None = None,
    n: int | None = None,
    seed: int = DEFAULT_SYNTH_SEED,
    schema: Schema | None = None,
    encodings: EncodingSpec | None = None,
) -> pd.DataFrame:
    """
    Draw a raw survey table.

    Marginal mode (no signal) draws the label from the stratifier's
    per-category rates, then every other column from its category
    distribution given the label, which keeps both the category shares and
    the per-category rates of the table. Planted mode draws columns from
    their marginals and the label from the logistic signal.

    Args:
        spec: Marginals; the built-in table when None
        signal: Logistic label model for planted mode
        n: Row count, spec.n_default when None
        seed: Generator seed
        schema: Schema used to encode features for the signal
        encodings: Rules matching the schema

    Returns:
        DataFrame with child_id, z-score and raw feature columns as text
    """
    spec = spec or builtin_marginals()
    n = spec.n_default if n is None else n
    if n < 1:
        raise InvalidHyperparameter(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    columns: dict[str, np.ndarray] = {}

    if signal is None:
        stratifier = spec.features[spec.stratifier]
        strata = _draw_category(stratifier.probabilities, n, rng)
        rates = np.asarray(stratifier.rates)[strata]
        labels = (rng.random(n) < rates).astype(np.int64)
        columns[spec.stratifier] = np.asarray(stratifier.categories)[strata]
        for name, marginal in spec.features.items():
            if name == spec.stratifier:
                continue
            drawn = np.empty(n, dtype=object)
            for label in (0, 1):
                rows = np.flatnonzero(labels == label)
                picks = _draw_category(marginal.conditional(label), rows.size, rng)
                drawn[rows] = np.asarray(marginal.categories)[picks]
            columns[name] = drawn
    else:
        for name, marginal in spec.features.items():
            picks = _draw_category(marginal.probabilities, n, rng)
            columns[name] = np.asarray(marginal.categories)[picks]
        if schema is None or encodings is None:
            schema, encodings = load_schema()
        codes = encode_features(pd.DataFrame(columns), schema, encodings)
        base = signal.logits(codes, schema.feature_names, 0.0)
        intercept = signal.intercept
        if intercept is None:
            intercept = calibrate_intercept(base, signal.target_prevalence)
        probs = special.expit(base + intercept)
        expected = float(probs.mean())
        if abs(expected - signal.target_prevalence) > PREVALENCE_TOLERANCE:
            _LOGGER.warning(
                "Planted signal gives prevalence %.4f, requested %.4f",
                expected, signal.target_prevalence,
            )
        labels = (rng.random(n) < probs).astype(np.int64)
        _LOGGER.debug("Planted signal intercept %.4f, expected prevalence %.4f", intercept, expected)

    scores = draw_zscores(labels, rng)
    frame = pd.DataFrame({"child_id": [f"c{i:05d}" for i in range(n)]})
    for position, name in enumerate(ZSCORE_COLUMNS):
        frame[name] = [f"{value:.2f}" for value in scores[:, position]]
    for name, values in columns.items():
        frame[name] = values.astype(str)
    _LOGGER.info(
        "Generated %d synthetic rows (seed %s, %s mode, %d malnourished)",
        n, seed, MODE_PLANTED if signal else MODE_MARGINAL, int(labels.sum()),
    )
    return frame


def planted_dataset(
    n: int,
    n_informative: int,
    n_noise: int,
    coef: float = 1.0,
    seed: int = DEFAULT_SYNTH_SEED,
) -> Dataset:
    """
    Numeric dataset of fair binary features where only the first
    n_informative drive a logistic label with the given coefficient.
    """
    if n < 2 or n_informative < 0 or n_noise < 0 or n_informative + n_noise < 1:
        raise InvalidHyperparameter("need n >= 2 and at least one feature")
    rng = np.random.default_rng(seed)
    width = n_informative + n_noise
    features = (rng.random((n, width)) < 0.5).astype(np.float64)
    logits = coef * (features[:, :n_informative] - 0.5).sum(axis=1)
    labels = (rng.random(n) < special.expit(logits)).astype(np.int64)
    # both classes are needed downstream
    if labels.min() == labels.max():
        labels[0] = 1 - labels[0]
    names = tuple(
        [f"informative_{i}" for i in range(n_informative)]
        + [f"noise_{i}" for i in range(n_noise)]
    )
    return Dataset(features, labels, names)


@dataclass(frozen=True)
class SynthRequest:
    """Parameters of one CLI synth call."""
    n: int = DEFAULT_SYNTH_ROWS
    seed: int = DEFAULT_SYNTH_SEED
    mode: str = MODE_MARGINAL
    strength: str = "moderate"

    def run(self) -> pd.DataFrame:
        if self.mode not in (MODE_MARGINAL, MODE_PLANTED):
            raise InvalidHyperparameter(f"unknown synth mode {self.mode!r}")
        signal = default_signal(self.strength) if self.mode == MODE_PLANTED else None
        return generate(signal=signal, n=self.n, seed=self.seed)
