"""
Unit tests for the synthetic survey generator.

Run with: pytest tests/test_synth.py -v
"""
import numpy as np
import pandas as pd
import pytest
from scipy import special

from nutriscreen.const import (
    DEFAULT_SYNTH_ROWS,
    MALNOURISHED_COUNT,
    STUNTED_RATE,
    UNDERWEIGHT_RATE,
    WASTED_RATE,
)
from nutriscreen.errors import InvalidHyperparameter, SchemaError
from nutriscreen.preprocess import derive_labels, encode, load_schema
from nutriscreen.synth import (
    MODE_PLANTED,
    FeatureMarginal,
    SynthRequest,
    builtin_marginals,
    calibrate_intercept,
    default_signal,
    draw_zscores,
    flag_probabilities,
    generate,
    planted_dataset,
)

PREVALENCE = MALNOURISHED_COUNT / DEFAULT_SYNTH_ROWS


@pytest.fixture(scope="module")
def frame():
    return generate(n=4000, seed=7)


# =============================================================================
# Marginal Tests
# =============================================================================

class TestMarginals:
    """Tests for the built-in descriptive marginals."""

    def test_probabilities_sum_to_one(self):
        """Every column's category shares sum to one."""
        for marginal in builtin_marginals().features.values():
            assert marginal.probabilities.sum() == pytest.approx(1.0)

    def test_implied_prevalence(self):
        """The stratifier reproduces the overall 2745/6416 rate."""
        assert builtin_marginals().prevalence == pytest.approx(PREVALENCE, abs=1e-9)

    def test_conditional_is_bayes(self):
        """Conditional shares recombine to the marginal share."""
        marginal = FeatureMarginal(("a", "b"), (3.0, 1.0), (0.5, 0.25))
        prevalence = marginal.implied_prevalence
        mixed = prevalence * marginal.conditional(1) + (1 - prevalence) * marginal.conditional(0)
        np.testing.assert_allclose(mixed, marginal.probabilities)

    def test_bad_rate(self):
        """Rates outside [0, 1] are rejected."""
        with pytest.raises(SchemaError):
            FeatureMarginal(("a",), (1.0,), (1.5,))


# =============================================================================
# Generation Tests
# =============================================================================

class TestGenerate:
    """Tests for marginal-mode generation."""

    def test_deterministic(self):
        """The same seed gives the same table."""
        pd.testing.assert_frame_equal(generate(n=200, seed=3), generate(n=200, seed=3))

    def test_seed_changes_output(self):
        """Different seeds give different tables."""
        assert not generate(n=200, seed=3).equals(generate(n=200, seed=4))

    def test_encodes_with_default_schema(self, frame):
        """Generated tables pass through the encoder."""
        schema, encodings = load_schema()
        ds = encode(frame, schema, encodings)
        assert ds.n_rows == 4000
        assert ds.n_cols == 18

    def test_prevalence(self, frame):
        """The derived label rate is close to the survey rate."""
        rate = derive_labels(frame)["malnutrition"].mean()
        assert rate == pytest.approx(PREVALENCE, abs=0.04)

    def test_component_rates(self, frame):
        """Underweight, stunting and wasting rates track the survey."""
        labels = derive_labels(frame)
        assert labels["underweight"].mean() == pytest.approx(UNDERWEIGHT_RATE, abs=0.04)
        assert labels["stunted"].mean() == pytest.approx(STUNTED_RATE, abs=0.04)
        assert labels["wasted"].mean() == pytest.approx(WASTED_RATE, abs=0.04)

    def test_category_rates(self, frame):
        """Per-category malnutrition rates follow the wealth gradient."""
        spec = builtin_marginals()
        labels = derive_labels(frame)["malnutrition"]
        for category in ("poorest", "richest"):
            observed = labels[frame["wealth_index"] == category].mean()
            assert observed == pytest.approx(spec.rate("wealth_index", category), abs=0.08)

    def test_rejects_empty(self):
        """n must be positive."""
        with pytest.raises(InvalidHyperparameter):
            generate(n=0)


class TestZScores:
    """Tests for label-consistent z-score draws."""

    def test_consistent_with_labels(self):
        """Positives have a component below -2, negatives none."""
        labels = np.array([1, 0] * 500)
        scores = draw_zscores(labels, np.random.default_rng(0))
        flagged = (scores < -2.0).any(axis=1)
        np.testing.assert_array_equal(flagged, labels == 1)
        assert np.abs(scores).max() <= 6.0

    def test_flag_probabilities(self):
        """Solved flag rates give the target shares given any flag."""
        target = np.array([0.5, 0.7, 0.3])
        probs = flag_probabilities(target)
        any_flag = 1.0 - np.prod(1.0 - probs)
        np.testing.assert_allclose(probs / any_flag, target, rtol=1e-6)


# =============================================================================
# Planted Signal Tests
# =============================================================================

class TestPlanted:
    """Tests for the planted-signal mode."""

    def test_calibrate_intercept(self):
        """The calibrated intercept hits the target mean probability."""
        base = np.random.default_rng(0).normal(size=1000)
        intercept = calibrate_intercept(base, 0.3)
        assert special.expit(base + intercept).mean() == pytest.approx(0.3, abs=1e-8)

    def test_calibrate_bad_target(self):
        """Targets outside (0, 1) are rejected."""
        with pytest.raises(InvalidHyperparameter):
            calibrate_intercept(np.zeros(3), 1.0)

    def test_unknown_strength(self):
        """Only moderate and strong signals exist."""
        with pytest.raises(InvalidHyperparameter):
            default_signal("extreme")

    def test_strong_doubles(self):
        """The strong signal doubles every coefficient."""
        moderate = default_signal("moderate").coefficients
        strong = default_signal("strong").coefficients
        for name, coef in moderate.items():
            assert strong[name] == pytest.approx(2 * coef)

    def test_planted_prevalence(self):
        """Planted mode lands near the target prevalence."""
        table = generate(signal=default_signal(), n=3000, seed=11)
        assert derive_labels(table)["malnutrition"].mean() == pytest.approx(PREVALENCE, abs=0.04)

    def test_planted_dataset(self):
        """planted_dataset names informative columns first."""
        ds = planted_dataset(n=300, n_informative=2, n_noise=3, seed=1)
        assert ds.feature_names[:2] == ("informative_0", "informative_1")
        assert ds.n_cols == 5
        assert set(np.unique(ds.features)) <= {0.0, 1.0}
        assert 0 < ds.labels.sum() < ds.n_rows

    def test_planted_dataset_needs_columns(self):
        """At least one column is required."""
        with pytest.raises(InvalidHyperparameter):
            planted_dataset(n=10, n_informative=0, n_noise=0)


class TestSynthRequest:
    """Tests for the CLI-facing request object."""

    def test_planted_mode(self):
        """The planted mode runs through the request object."""
        out = SynthRequest(n=50, seed=2, mode=MODE_PLANTED).run()
        assert len(out) == 50
        assert {"waz", "haz", "whz", "province"} <= set(out.columns)

    def test_unknown_mode(self):
        """An unknown mode is rejected."""
        with pytest.raises(InvalidHyperparameter):
            SynthRequest(mode="bootstrap").run()


@pytest.mark.slow
class TestFullSizeSample:
    """Acceptance checks on a survey-sized synthetic sample."""

    def test_full_size_rates(self):
        """6,416 rows reproduce prevalence and category rates closely."""
        table = generate(n=DEFAULT_SYNTH_ROWS, seed=7)
        labels = derive_labels(table)["malnutrition"]
        assert labels.mean() == pytest.approx(PREVALENCE, abs=0.02)
        spec = builtin_marginals()
        for feature in ("wealth_index", "mother_education", "residence"):
            marginal = spec.features[feature]
            for category, weight in zip(marginal.categories, marginal.probabilities):
                if weight < 0.1:
                    continue
                observed = labels[table[feature] == category].mean()
                assert observed == pytest.approx(spec.rate(feature, category), abs=0.05)
