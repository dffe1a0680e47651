"""
Unit tests for the shared data representations.

Run with: pytest tests/test_data_model.py -v
"""
import json

import numpy as np
import pytest

from nutriscreen.data_model import (
    ColumnKind,
    ColumnSpec,
    ColumnTag,
    Dataset,
    MissingPolicy,
    Schema,
    TrainedModel,
    kfold_stratified,
    split_stratified,
)
from nutriscreen.errors import (
    DatasetInvalid,
    DimensionMismatch,
    RatioOutOfRange,
    SchemaError,
    SingleClassDataset,
    TooFewPerClass,
)


def make_dataset(n_pos=30, n_neg=70, n_cols=3):
    rng = np.random.default_rng(0)
    labels = np.array([1] * n_pos + [0] * n_neg)
    features = rng.normal(size=(labels.size, n_cols))
    return Dataset(features, labels, tuple(f"f{i}" for i in range(n_cols)))


# =============================================================================
# Schema Tests
# =============================================================================

class TestSchema:
    """Tests for Schema and ColumnKind validation."""

    def test_ordinal_needs_levels(self):
        """An ordinal column without at least two levels is rejected."""
        with pytest.raises(SchemaError):
            ColumnKind(ColumnTag.ORDINAL, levels=1)

    def test_onehot_needs_group(self):
        """A onehot column must name its group and category index."""
        with pytest.raises(SchemaError):
            ColumnKind(ColumnTag.ONEHOT_GROUP)

    def test_duplicate_names_rejected(self):
        """Column names must be unique."""
        col = ColumnSpec("a", ColumnKind(ColumnTag.BINARY))
        with pytest.raises(SchemaError):
            Schema((col, col))

    def test_target_cannot_be_feature(self):
        """The target name cannot double as a feature column."""
        col = ColumnSpec("malnutrition", ColumnKind(ColumnTag.BINARY))
        with pytest.raises(SchemaError):
            Schema((col,))

    def test_onehot_order_enforced(self):
        """Group members must be listed in category-index order."""
        first = ColumnSpec("b", ColumnKind(ColumnTag.ONEHOT_GROUP, group_name="g", category_index=2), source="g")
        second = ColumnSpec("a", ColumnKind(ColumnTag.ONEHOT_GROUP, group_name="g", category_index=1), source="g")
        with pytest.raises(SchemaError):
            Schema((first, second))

    def test_feature_columns_skip_zscores(self):
        """Z-score and identifier columns are not features."""
        schema = Schema((
            ColumnSpec("child_id", ColumnKind(ColumnTag.IDENTIFIER)),
            ColumnSpec("waz", ColumnKind(ColumnTag.ZSCORE)),
            ColumnSpec("residence", ColumnKind(ColumnTag.BINARY)),
        ))
        assert schema.feature_names == ("residence",)

    def test_json_round_trip(self):
        """to_json/from_json preserve every column attribute."""
        schema = Schema((
            ColumnSpec("left_alone", ColumnKind(ColumnTag.ORDINAL, levels=8), MissingPolicy.NOT_ASKED_RECODE),
            ColumnSpec("koshi", ColumnKind(ColumnTag.ONEHOT_GROUP, group_name="province", category_index=1),
                       source="province"),
        ))
        restored = Schema.from_json(json.loads(json.dumps(schema.to_json())))
        assert restored == schema
        assert restored.column("koshi").source_column == "province"


# =============================================================================
# Dataset Tests
# =============================================================================

class TestDataset:
    """Tests for the Dataset container."""

    def test_rejects_nan(self):
        """Non-finite features are rejected."""
        with pytest.raises(DatasetInvalid):
            Dataset(np.array([[np.nan]]), np.array([1]), ("a",))

    def test_rejects_non_binary_labels(self):
        """Labels outside {0, 1} are rejected."""
        with pytest.raises(DatasetInvalid):
            Dataset(np.zeros((2, 1)), np.array([0, 2]), ("a",))

    def test_rejects_name_count_mismatch(self):
        """Feature names must match the column count."""
        with pytest.raises(DatasetInvalid):
            Dataset(np.zeros((2, 2)), np.array([0, 1]), ("a",))

    def test_arrays_read_only(self):
        """Stored arrays cannot be modified in place."""
        ds = make_dataset()
        with pytest.raises(ValueError):
            ds.features[0, 0] = 1.0

    def test_copy_on_construction(self):
        """Mutating the source array does not change the dataset."""
        features = np.zeros((2, 1))
        ds = Dataset(features, np.array([0, 1]), ("a",))
        features[0, 0] = 5.0
        assert ds.features[0, 0] == 0.0

    def test_select_reorders_columns(self):
        """select returns columns in the requested order."""
        ds = make_dataset()
        picked = ds.select(["f2", "f0"])
        assert picked.feature_names == ("f2", "f0")
        np.testing.assert_array_equal(picked.features[:, 0], ds.features[:, 2])

    def test_select_unknown(self):
        """Selecting an unknown column raises."""
        with pytest.raises(DatasetInvalid):
            make_dataset().select(["nope"])

    def test_fingerprint_stable(self):
        """Equal content gives equal fingerprints, changed labels do not."""
        ds = make_dataset()
        same = Dataset(ds.features, ds.labels, ds.feature_names)
        flipped = Dataset(ds.features, 1 - ds.labels, ds.feature_names)
        assert ds.fingerprint() == same.fingerprint()
        assert ds.fingerprint() != flipped.fingerprint()

    def test_csv_round_trip(self, tmp_path):
        """to_csv/read_csv reproduce the dataset bit for bit."""
        ds = make_dataset()
        path = ds.to_csv(tmp_path / "ds.csv")
        assert (tmp_path / "ds.json").exists()
        restored = Dataset.read_csv(path)
        assert restored.fingerprint() == ds.fingerprint()

    def test_read_without_sidecar(self, tmp_path):
        """Without a sidecar the target column is found by name."""
        ds = make_dataset()
        path = tmp_path / "plain.csv"
        ds.to_frame().to_csv(path, index=False)
        restored = Dataset.read_csv(path)
        assert restored.feature_names == ds.feature_names
        np.testing.assert_array_equal(restored.labels, ds.labels)


# =============================================================================
# Split Tests
# =============================================================================

class TestSplitStratified:
    """Tests for the stratified train/test split."""

    def test_sizes(self):
        """80/20 of 100 rows with 30 positives puts 24 positives in train."""
        ds = make_dataset()
        plan = split_stratified(ds, 0.8, seed=1)
        train, test = plan.apply(ds)
        assert train.n_rows == 80
        assert test.n_rows == 20
        assert int(train.labels.sum()) == 24
        assert int(test.labels.sum()) == 6

    def test_partition(self):
        """Train and test indices are disjoint and cover every row."""
        ds = make_dataset(n_pos=17, n_neg=41)
        plan = split_stratified(ds, 0.7, seed=3)
        joined = np.sort(np.concatenate([plan.train_indices, plan.test_indices]))
        np.testing.assert_array_equal(joined, np.arange(ds.n_rows))

    def test_deterministic(self):
        """The same seed gives the same split."""
        ds = make_dataset()
        first = split_stratified(ds, 0.8, seed=5)
        second = split_stratified(ds, 0.8, seed=5)
        np.testing.assert_array_equal(first.train_indices, second.train_indices)

    @pytest.mark.parametrize("ratio", [0.0, 1.0, -0.1, 1.5])
    def test_bad_ratio(self, ratio):
        """Ratios outside (0, 1) are rejected."""
        with pytest.raises(RatioOutOfRange):
            split_stratified(make_dataset(), ratio)

    def test_single_class(self):
        """A dataset with one class cannot be stratified."""
        with pytest.raises(SingleClassDataset):
            split_stratified(make_dataset(n_pos=0, n_neg=10))


class TestKFoldStratified:
    """Tests for stratified k-fold assignment."""

    def test_balanced_folds(self):
        """Each class is spread evenly over the folds."""
        ds = make_dataset(n_pos=10, n_neg=10)
        plan = kfold_stratified(ds, 5, seed=0)
        np.testing.assert_array_equal(plan.fold_sizes(), [4, 4, 4, 4, 4])
        for _, test_idx in plan.folds():
            assert int(ds.labels[test_idx].sum()) == 2

    def test_folds_partition_rows(self):
        """Test folds are disjoint and cover every row once."""
        ds = make_dataset(n_pos=13, n_neg=22)
        seen = np.concatenate([test for _, test in kfold_stratified(ds, 4).folds()])
        np.testing.assert_array_equal(np.sort(seen), np.arange(ds.n_rows))

    def test_too_few_per_class(self):
        """A class smaller than k is rejected."""
        with pytest.raises(TooFewPerClass):
            kfold_stratified(make_dataset(n_pos=3, n_neg=20), 5)

    def test_leave_one_out(self):
        """k equal to the row count is accepted even with a tiny class."""
        ds = make_dataset(n_pos=2, n_neg=4)
        plan = kfold_stratified(ds, 6)
        np.testing.assert_array_equal(plan.fold_sizes(), np.ones(6))


# =============================================================================
# TrainedModel Tests
# =============================================================================

class ConstantModel(TrainedModel):
    kind = "constant"

    def __init__(self, value, n_features=2):
        self.value = value
        self.n_features = n_features

    def score(self, features):
        rows = self._check_width(features)
        return np.full(rows.shape[0], self.value)

    def to_dict(self):
        return {"kind": self.kind, "value": self.value}

    @classmethod
    def from_dict(cls, payload):
        return cls(payload["value"])


class TestTrainedModel:
    """Tests for the shared model contract."""

    def test_threshold_tie_goes_to_positive(self):
        """A score equal to the threshold predicts class 1."""
        model = ConstantModel(0.5)
        np.testing.assert_array_equal(model.predict(np.zeros((3, 2))), [1, 1, 1])

    def test_custom_threshold(self):
        """predict honours the threshold argument."""
        model = ConstantModel(0.4)
        assert model.predict(np.zeros((1, 2)), threshold=0.3)[0] == 1
        assert model.predict(np.zeros((1, 2)))[0] == 0

    def test_width_checked(self):
        """Scoring a matrix of the wrong width raises."""
        with pytest.raises(DimensionMismatch):
            ConstantModel(0.5).score(np.zeros((2, 3)))

    def test_single_row_reshaped(self):
        """A 1-D input is treated as one row."""
        assert ConstantModel(0.9).score(np.zeros(2)).shape == (1,)
