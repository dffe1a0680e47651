"""
Unit tests for the autodiff engine and the neural architectures.

Gradients are checked against central finite differences.

Run with: pytest tests/test_autodiff_nn.py -v
"""
import json
import math
from unittest.mock import patch

import numpy as np
import pytest
from scipy import special

from nutriscreen.data_model import Dataset
from nutriscreen.errors import (
    DivergenceDetected,
    InvalidHyperparameter,
    NonScalarOutput,
    WrongArchitecture,
)
from nutriscreen.autodiff_nn import (
    Arch,
    BatchNorm,
    Dropout,
    LayerKind,
    LayerSpec,
    NnModel,
    NnSpec,
    Pass,
    TabNetLite,
    TabNetLiteSpec,
    Tensor,
    WideDeepNetwork,
    batch_norm,
    bce_with_logits,
    build_network,
    concat,
    entropy,
    fit_nn,
    leaky_relu,
    learning_rate_at,
    sigmoid,
    sparsemax,
    sparsemax_values,
    tabnet_masks,
)

TOLERANCE = 1e-4


def numeric_grad(loss_fn, tensor, eps=1e-6):
    """Central-difference gradient of loss_fn() with respect to tensor.values."""
    grad = np.zeros_like(tensor.values)
    for index in np.ndindex(tensor.shape):
        original = tensor.values[index]
        tensor.values[index] = original + eps
        up = loss_fn()
        tensor.values[index] = original - eps
        down = loss_fn()
        tensor.values[index] = original
        grad[index] = (up - down) / (2 * eps)
    return grad


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def check_gradients(build_loss, tensors):
    """Compare backward() with finite differences for every tensor."""
    loss = build_loss()
    loss.backward()
    analytic = [t.grad.copy() for t in tensors]
    for tensor, grad in zip(tensors, analytic):
        numeric = numeric_grad(lambda: float(build_loss().values), tensor)
        assert relative_error(grad, numeric) < TOLERANCE


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# =============================================================================
# Tensor Engine Tests
# =============================================================================

class TestTensor:
    """Tests for reverse-mode differentiation."""

    def test_non_scalar_backward(self):
        """backward() on a vector raises."""
        with pytest.raises(NonScalarOutput):
            Tensor(np.ones(3), requires_grad=True).backward()

    def test_shared_node_accumulates(self):
        """A tensor used twice receives both gradient contributions."""
        x = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        (x * x + x).sum().backward()
        np.testing.assert_allclose(x.grad, 2 * x.values + 1)

    def test_broadcast_gradient(self, rng):
        """A broadcast bias gets the gradient summed over rows."""
        x = Tensor(rng.normal(size=(4, 3)))
        b = Tensor(np.zeros(3), requires_grad=True)
        (x + b).sum().backward()
        np.testing.assert_allclose(b.grad, [4.0, 4.0, 4.0])

    def test_dense_chain(self, rng):
        """matmul, add, leaky_relu and mean match finite differences."""
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = Tensor(rng.normal(size=2), requires_grad=True)
        check_gradients(lambda: leaky_relu(x @ w + b, 0.1).mean(), [x, w, b])

    def test_sigmoid_concat_reshape(self, rng):
        """sigmoid, concat and reshape match finite differences."""
        a = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
        c = Tensor(rng.normal(size=(3, 1)), requires_grad=True)
        weights = Tensor(rng.normal(size=9))
        check_gradients(lambda: (sigmoid(concat([a, c], axis=1)).reshape(9) * weights).sum(), [a, c])

    def test_mean_over_axis(self, rng):
        """Axis-wise mean matches finite differences."""
        x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        weights = Tensor(rng.normal(size=3))
        check_gradients(lambda: (x.mean(axis=0) * weights).sum(), [x])


class TestLoss:
    """Tests for binary cross-entropy with logits."""

    def test_gradient_is_residual(self, rng):
        """With unit weight the logit gradient is (sigmoid - y) / n."""
        z = Tensor(rng.normal(size=6), requires_grad=True)
        y = np.array([0, 1, 1, 0, 1, 0])
        bce_with_logits(z, y).backward()
        np.testing.assert_allclose(z.grad, (special.expit(z.values) - y) / 6)

    def test_value(self):
        """Zero logits give log(2)."""
        loss = bce_with_logits(Tensor(np.zeros(4)), np.array([0, 1, 0, 1]))
        assert float(loss.values) == pytest.approx(math.log(2))

    def test_pos_weight_gradient(self, rng):
        """Weighted loss matches finite differences."""
        z = Tensor(rng.normal(size=5), requires_grad=True)
        y = np.array([1, 0, 1, 0, 0])
        check_gradients(lambda: bce_with_logits(z, y, pos_weight=2.5), [z])

    def test_extreme_logits_finite(self):
        """Very large logits do not overflow."""
        loss = bce_with_logits(Tensor(np.array([800.0, -800.0])), np.array([0, 1]))
        assert float(loss.values) == pytest.approx(800.0)


class TestBatchNorm:
    """Tests for batch normalization."""

    def test_normalizes(self, rng):
        """Outputs have zero mean and unit variance per column."""
        x = Tensor(rng.normal(3.0, 2.0, size=(50, 4)))
        out, _, _ = batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.values.mean(axis=0), 0.0, atol=1e-10)
        np.testing.assert_allclose(out.values.var(axis=0), 1.0, atol=1e-4)

    def test_gradients(self, rng):
        """Input, scale and shift gradients match finite differences."""
        x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
        gamma = Tensor(rng.normal(size=3), requires_grad=True)
        beta = Tensor(rng.normal(size=3), requires_grad=True)
        weights = Tensor(rng.normal(size=(6, 3)))
        check_gradients(lambda: (batch_norm(x, gamma, beta)[0] * weights).sum(), [x, gamma, beta])

    def test_inference_ignores_row_order(self, rng):
        """Running statistics make inference row-wise and order independent."""
        layer = BatchNorm(3)
        for _ in range(5):
            layer.forward(Tensor(rng.normal(2.0, 3.0, size=(16, 3))), Pass(training=True))
        x = rng.normal(size=(10, 3))
        order = rng.permutation(10)
        out = layer.forward(Tensor(x), Pass(training=False)).values
        shuffled = layer.forward(Tensor(x[order]), Pass(training=False)).values
        np.testing.assert_array_equal(shuffled, out[order])
        np.testing.assert_array_equal(layer.forward(Tensor(x), Pass(training=False)).values, out)
        single = layer.forward(Tensor(x[:1]), Pass(training=False)).values
        np.testing.assert_allclose(single, out[:1])


class TestSparsemax:
    """Tests for sparsemax and entropy."""

    def test_simplex(self, rng):
        """Rows are non-negative and sum to one."""
        out = sparsemax_values(rng.normal(size=(10, 5)))
        assert (out >= 0).all()
        np.testing.assert_allclose(out.sum(axis=1), 1.0)

    def test_known_values(self):
        """A dominant entry takes all the mass; ties share it."""
        np.testing.assert_allclose(sparsemax_values(np.array([[1.0, 0.0, 0.0]])), [[1.0, 0.0, 0.0]])
        np.testing.assert_allclose(sparsemax_values(np.array([[0.5, 0.5]])), [[0.5, 0.5]])
        np.testing.assert_allclose(sparsemax_values(np.array([[0.3, 0.1, -2.0]])), [[0.6, 0.4, 0.0]])

    def test_gradient(self, rng):
        """Sparsemax matches finite differences away from support changes."""
        z = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        weights = Tensor(rng.normal(size=(4, 5)))
        check_gradients(lambda: (sparsemax(z) * weights).sum(), [z])

    def test_entropy_uniform(self):
        """A uniform row has entropy log(p)."""
        assert float(entropy(Tensor(np.full((1, 4), 0.25))).values[0]) == pytest.approx(math.log(4))

    def test_entropy_gradient(self, rng):
        """Entropy matches finite differences."""
        p = Tensor(rng.uniform(0.1, 1.0, size=(3, 4)), requires_grad=True)
        check_gradients(lambda: entropy(p).sum(), [p])


# =============================================================================
# Layer and Architecture Tests
# =============================================================================

class TestLayerSpec:
    """Tests for layer plan validation."""

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": "dense", "units": 0},
            {"kind": "dropout", "rate": 1.0},
            {"kind": "leaky_relu", "slope": -0.1},
            {"kind": "residual_block", "units": 8},
        ],
    )
    def test_invalid(self, kwargs):
        """Malformed layers are rejected."""
        with pytest.raises(InvalidHyperparameter):
            LayerSpec(**kwargs)

    def test_dnn_plan(self):
        """Each hidden width contributes dense, norm, activation and dropout."""
        plan = NnSpec(widths=(8, 4)).dnn_plan()
        assert [layer.kind for layer in plan[:4]] == [
            LayerKind.DENSE, LayerKind.BATCH_NORM, LayerKind.LEAKY_RELU, LayerKind.DROPOUT,
        ]
        assert plan[-1].kind is LayerKind.SIGMOID_HEAD
        assert len(plan) == 9

    def test_resnet_plan_passes_settings(self):
        """The residual block inherits dropout and slope."""
        plan = NnSpec(dropout=0.2, slope=0.05).resnet_plan()
        block = next(layer for layer in plan if layer.kind is LayerKind.RESIDUAL_BLOCK)
        assert block.rate == 0.2 and block.slope == 0.05

    def test_bad_tabnet_relax(self):
        """Prior relaxation below one is rejected."""
        with pytest.raises(InvalidHyperparameter):
            TabNetLiteSpec(relax=0.5)


SMALL = NnSpec(widths=(5, 4), res_width=4, res_depth=2, dropout=0.0,
               tabnet=TabNetLiteSpec(n_steps=2, feature_dim=4, sparsity=0.01))


class TestNetworkGradients:
    """Whole-network gradients in training mode."""

    @pytest.mark.parametrize("arch", list(Arch))
    def test_parameter_gradients(self, arch):
        """Every trainable parameter matches finite differences."""
        rng = np.random.default_rng(1)
        network = build_network(arch, 3, SMALL, rng)
        x = Tensor(rng.normal(size=(6, 3)))
        y = np.array([0, 1, 1, 0, 1, 0])

        def build_loss():
            out, penalty = network.logits(x, Pass(training=True))
            loss = bce_with_logits(out, y)
            return loss + penalty if penalty is not None else loss

        check_gradients(build_loss, network.trainable())


class TestModules:
    """Tests for module bookkeeping."""

    def test_state_dict_round_trip(self, rng):
        """Loading a state dict reproduces the outputs."""
        first = build_network(Arch.RESNET_MLP, 3, SMALL, np.random.default_rng(1))
        second = build_network(Arch.RESNET_MLP, 3, SMALL, np.random.default_rng(2))
        second.load_state_dict(first.state_dict())
        x = Tensor(rng.normal(size=(4, 3)))
        out1, _ = first.logits(x, Pass(training=False))
        out2, _ = second.logits(x, Pass(training=False))
        np.testing.assert_array_equal(out1.values, out2.values)

    def test_frozen_deep_path(self, rng):
        """Freezing zeroes the deep head and hides deep parameters."""
        net = WideDeepNetwork(NnSpec(widths=(4,), freeze_deep=True), 3, rng)
        frozen = {id(t) for _, t in net.deep.named_parameters()} | {id(t) for _, t in net.deep_head.named_parameters()}
        assert not frozen & {id(t) for t in net.trainable()}
        np.testing.assert_array_equal(net.deep_head.weight.values, 0.0)

    def test_dropout_identity_at_inference(self, rng):
        """Dropout passes inputs through unchanged outside training."""
        x = Tensor(rng.normal(size=(8, 5)))
        out = Dropout(0.5).forward(x, Pass(training=False, rng=np.random.default_rng(3)))
        np.testing.assert_array_equal(out.values, x.values)
        trained = Dropout(0.5).forward(x, Pass(training=True, rng=np.random.default_rng(3)))
        assert np.any(trained.values == 0.0)

    def test_inference_is_deterministic_with_dropout(self, rng):
        """A network with heavy dropout scores the same rows identically twice."""
        net = build_network(Arch.DNN, 3, NnSpec(widths=(6,), dropout=0.5), np.random.default_rng(1))
        x = Tensor(rng.normal(size=(5, 3)))
        first, _ = net.logits(x, Pass(training=False, rng=np.random.default_rng(0)))
        second, _ = net.logits(x, Pass(training=False, rng=np.random.default_rng(9)))
        np.testing.assert_array_equal(first.values, second.values)

    def test_learning_rate_schedule(self):
        """The rate halves after each quarter, at most three times."""
        rates = [learning_rate_at(epoch, 8, 1.0) for epoch in range(8)]
        assert rates == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25, 0.125, 0.125]
        assert learning_rate_at(100, 8, 1.0) == 0.125


# =============================================================================
# Training Tests
# =============================================================================

class TestFitNn:
    """Tests for SGD training of the four architectures."""

    @pytest.mark.parametrize("arch", list(Arch))
    def test_learns_separable(self, separable, arch):
        """Every architecture separates well-separated classes."""
        spec = NnSpec(widths=(8, 4), res_width=8, tabnet=TabNetLiteSpec(n_steps=2, feature_dim=8))
        model = fit_nn(separable, arch, spec, epochs=40, batch_size=32, lr=0.05, seed=0)
        accuracy = np.mean(model.predict(separable.features) == separable.labels)
        assert accuracy > 0.9
        assert model.loss_curve[-1] < model.loss_curve[0]

    def test_deterministic(self, separable):
        """The same seed gives the same network."""
        first = fit_nn(separable, Arch.DNN, epochs=3, seed=4)
        second = fit_nn(separable, Arch.DNN, epochs=3, seed=4)
        np.testing.assert_array_equal(first.score(separable.features), second.score(separable.features))

    def test_round_trip(self, separable):
        """A reloaded network scores identically."""
        model = fit_nn(separable, Arch.TABNET_LITE, epochs=2, seed=0)
        restored = NnModel.from_dict(json.loads(json.dumps(model.to_dict())))
        np.testing.assert_allclose(restored.score(separable.features), model.score(separable.features))

    def test_frozen_deep_unchanged(self, separable):
        """Training with a frozen deep path leaves its weights alone."""
        spec = NnSpec(widths=(4,), freeze_deep=True)
        model = fit_nn(separable, Arch.WIDE_DEEP, spec, epochs=3, seed=0)
        untouched = build_network(Arch.WIDE_DEEP, 2, spec, np.random.default_rng(0))
        np.testing.assert_array_equal(
            model.network.deep.state_dict()["0.weight"], untouched.deep.state_dict()["0.weight"]
        )

    def test_divergence(self, separable):
        """A non-finite loss stops training."""
        with patch("nutriscreen.autodiff_nn.bce_with_logits", return_value=Tensor(np.nan)):
            with pytest.raises(DivergenceDetected):
                fit_nn(separable, Arch.DNN, epochs=1)

    def test_bad_settings(self, separable):
        """Non-positive epochs or learning rates are rejected."""
        with pytest.raises(InvalidHyperparameter):
            fit_nn(separable, epochs=0)
        with pytest.raises(InvalidHyperparameter):
            fit_nn(separable, lr=0.0)

    def test_balanced_weight(self, separable):
        """The balanced option trains without error on skewed labels."""
        skewed = separable.subset(list(range(10)) + list(range(60, 120)))
        model = fit_nn(skewed, Arch.DNN, epochs=2, pos_weight="balanced", seed=0)
        assert model.score(skewed.features).shape == (70,)


class TestTabNetMasks:
    """Tests for attention mask extraction."""

    def test_shapes_and_mass(self, separable):
        """Masks are per row and step; importance sums to one."""
        spec = NnSpec(tabnet=TabNetLiteSpec(n_steps=3, feature_dim=4))
        model = fit_nn(separable, Arch.TABNET_LITE, spec, epochs=2, seed=0)
        masks, importance = tabnet_masks(model, separable)
        assert masks.shape == (separable.n_rows, 3, 2)
        np.testing.assert_allclose(masks.sum(axis=2), 1.0)
        assert importance.sum() == pytest.approx(1.0)

    def test_masks_are_row_independent(self, separable):
        """Scoring a slice gives the same masks as those rows in the full batch."""
        model = fit_nn(separable, Arch.TABNET_LITE, epochs=2, seed=0)
        full, _ = tabnet_masks(model, separable)
        part, _ = tabnet_masks(model, separable.subset(list(range(5))))
        np.testing.assert_allclose(part, full[:5])
        again, _ = tabnet_masks(model, separable)
        np.testing.assert_array_equal(again, full)

    def test_full_use_blocks_feature_later(self, rng):
        """Without relaxation a feature used with mask 1 is masked out at every later step."""
        net = TabNetLite(TabNetLiteSpec(n_steps=3, feature_dim=4, relax=1.0), 4, 0.01, np.random.default_rng(2))
        net.attention[0].zero_()
        net.attention[0].bias.values[0] = 10.0
        _, masks = net.step_masks(Tensor(rng.normal(size=(12, 4))), Pass(training=False))
        stacked = np.stack([m.values for m in masks], axis=1)
        np.testing.assert_array_equal(stacked[:, 0, 0], 1.0)
        np.testing.assert_array_equal(stacked[:, 1:, 0], 0.0)
        for t in range(stacked.shape[1]):
            rows, cols = np.nonzero(stacked[:, t, :] == 1.0)
            for row, col in zip(rows, cols):
                assert np.all(stacked[row, t + 1:, col] == 0.0)

    @pytest.mark.slow
    def test_attends_to_only_informative_feature(self):
        """With one informative column of ten the masks concentrate on it."""
        spec = NnSpec(tabnet=TabNetLiteSpec(n_steps=2, feature_dim=8, sparsity=0.05, relax=2.0))
        hits = 0
        for seed in range(10):
            rng = np.random.default_rng(seed)
            features = rng.normal(size=(600, 10))
            labels = (features[:, 0] + 0.3 * rng.normal(size=600) > 0).astype(int)
            names = tuple(f"x{j}" for j in range(10))
            ds = Dataset(features, labels, names)
            model = fit_nn(ds, Arch.TABNET_LITE, spec, epochs=40, batch_size=32, lr=0.05, seed=seed)
            _, importance = tabnet_masks(model, ds)
            hits += importance[0] > 0.5
        assert hits >= 8

    def test_wrong_architecture(self, separable):
        """Masks exist only for tabnet_lite."""
        model = fit_nn(separable, Arch.DNN, epochs=1, seed=0)
        with pytest.raises(WrongArchitecture):
            tabnet_masks(model, separable)

    def test_rejects_other_models(self, separable):
        """Non-network models are rejected too."""
        class Dummy:
            kind = "tree"
        with pytest.raises(WrongArchitecture):
            tabnet_masks(Dummy(), separable)
