"""
Reverse-mode automatic differentiation over dense numpy arrays, and the
four neural architectures trained with it: plain DNN, residual MLP,
wide-and-deep and TabNet-lite.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from enum import StrEnum
from typing import Any, Callable, ClassVar, Iterator, Sequence

import numpy as np
from scipy import special

from .const import (
    DEFAULT_SEED,
    DNN_WIDTHS,
    NN_BATCH_SIZE,
    NN_EPOCHS,
    NN_LEARNING_RATE,
    NN_MOMENTUM,
    RESNET_DEPTH,
    RESNET_WIDTH,
    TABNET_FEATURE_DIM,
    TABNET_RELAX,
    TABNET_SPARSITY,
    TABNET_STEPS,
)
from .data_model import Dataset, TrainedModel
from .errors import (
    DivergenceDetected,
    InvalidHyperparameter,
    NonScalarOutput,
    WrongArchitecture,
)

_LOGGER = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ENTROPY_EPS = 1e-12
BLOCKED_LOGIT = -1e6
LEAKY_SLOPE = 0.01
DROPOUT_RATE = 0.1
ATTENTION_INIT_SCALE = 0.01


# =============================================================================
# Tensor and operations
# =============================================================================

def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    """A value in the recorded graph, with its gradient after backward()."""

    def __init__(
        self,
        values: Any,
        requires_grad: bool = False,
        parents: tuple[Tensor, ...] = (),
        op: str = "",
    ) -> None:
        self.values = np.array(values, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.parents = parents
        self.op = op
        self._backward: Callable[[np.ndarray], None] | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.requires_grad:
            self.grad += _unbroadcast(grad, self.shape)

    def backward(self) -> None:
        """Populate .grad on every tensor that contributed to this scalar."""
        if self.values.size != 1:
            raise NonScalarOutput(f"backward needs a scalar output, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            stack.extend((parent, False) for parent in node.parents if id(parent) not in seen)
        for node in order:
            node.grad = np.zeros_like(node.values)
        self.grad = np.ones_like(self.values)
        for node in reversed(order):
            if node._backward is not None and node.requires_grad:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other: Any) -> Tensor:
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self) -> Tensor:
        return mul(self, -1.0)

    def __sub__(self, other: Any) -> Tensor:
        return add(self, -_lift(other))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def sum(self, axis: int | None = None) -> Tensor:
        return tensor_sum(self, axis)

    def mean(self, axis: int | None = None) -> Tensor:
        return tensor_mean(self, axis)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)


def _lift(value: Any) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(values: np.ndarray, parents: tuple[Tensor, ...], op: str, backward: Callable) -> Tensor:
    out = Tensor(values, requires_grad=any(p.requires_grad for p in parents), parents=parents, op=op)
    out._backward = backward
    return out


def add(a: Any, b: Any) -> Tensor:
    a, b = _lift(a), _lift(b)

    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad)
        b._accumulate(grad)

    return _result(a.values + b.values, (a, b), "add", backward)


def mul(a: Any, b: Any) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = _lift(a), _lift(b)

    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad * b.values)
        b._accumulate(grad * a.values)

    return _result(a.values * b.values, (a, b), "mul", backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad @ b.values.T)
        b._accumulate(a.values.T @ grad)

    return _result(a.values @ b.values, (a, b), "matmul", backward)


def tensor_sum(a: Tensor, axis: int | None = None) -> Tensor:
    def backward(grad: np.ndarray) -> None:
        g = grad if axis is None else np.expand_dims(grad, axis)
        a._accumulate(np.broadcast_to(g, a.shape).copy())

    return _result(a.values.sum(axis=axis), (a,), "sum", backward)


def tensor_mean(a: Tensor, axis: int | None = None) -> Tensor:
    count = a.values.size if axis is None else a.shape[axis]
    return mul(tensor_sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad.reshape(a.shape))

    return _result(a.values.reshape(tuple(shape)), (a,), "reshape", backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def backward(grad: np.ndarray) -> None:
        for t, piece in zip(tensors, np.split(grad, cuts, axis=axis)):
            t._accumulate(piece)

    return _result(np.concatenate([t.values for t in tensors], axis=axis), tuple(tensors), "concat", backward)


def leaky_relu(a: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    factor = np.where(a.values > 0, 1.0, slope)

    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad * factor)

    return _result(a.values * factor, (a,), "leaky_relu", backward)


def sigmoid(a: Tensor) -> Tensor:
    out = special.expit(a.values)

    def backward(grad: np.ndarray) -> None:
        a._accumulate(grad * out * (1.0 - out))

    return _result(out, (a,), "sigmoid", backward)


def bce_with_logits(logits: Tensor, labels: np.ndarray, pos_weight: float = 1.0) -> Tensor:
    """
    Mean binary cross-entropy of sigmoid(logits) against labels in [0, 1].

    pos_weight scales the positive-class term.
    """
    z = logits.values
    y = np.asarray(labels, dtype=np.float64).reshape(z.shape)
    losses = pos_weight * y * np.logaddexp(0.0, -z) + (1.0 - y) * np.logaddexp(0.0, z)
    p = special.expit(z)

    def backward(grad: np.ndarray) -> None:
        logits._accumulate(grad * (pos_weight * y * (p - 1.0) + (1.0 - y) * p) / z.size)

    return _result(np.asarray(losses.mean()), (logits,), "bce", backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = BN_EPS) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Training-mode batch norm; also returns the batch mean and variance."""
    mean = x.values.mean(axis=0)
    var = x.values.var(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.values - mean) * inv_std
    n = x.shape[0]

    def backward(grad: np.ndarray) -> None:
        gamma._accumulate((grad * xhat).sum(axis=0))
        beta._accumulate(grad.sum(axis=0))
        if x.requires_grad:
            dxhat = grad * gamma.values
            x._accumulate(
                inv_std / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
            )

    out = _result(gamma.values * xhat + beta.values, (x, gamma, beta), "batch_norm", backward)
    return out, mean, var


def dropout(x: Tensor, keep: np.ndarray, rate: float) -> Tensor:
    """Inverted dropout with a caller-supplied keep mask."""
    return mul(x, keep.astype(np.float64) / (1.0 - rate))


def sparsemax_values(z: np.ndarray) -> np.ndarray:
    """Euclidean projection of each row (last axis) onto the probability simplex."""
    rows = np.atleast_2d(np.asarray(z, dtype=np.float64))
    ordered = -np.sort(-rows, axis=1)
    cumulative = np.cumsum(ordered, axis=1)
    ks = np.arange(1, rows.shape[1] + 1)
    support = 1.0 + ks * ordered > cumulative
    k = support.sum(axis=1)
    tau = (cumulative[np.arange(rows.shape[0]), k - 1] - 1.0) / k
    return np.maximum(rows - tau[:, None], 0.0).reshape(np.shape(z))


def sparsemax(z: Tensor) -> Tensor:
    out = sparsemax_values(z.values)
    support = out > 0

    def backward(grad: np.ndarray) -> None:
        count = support.sum(axis=-1, keepdims=True)
        centred = (grad * support).sum(axis=-1, keepdims=True) / count
        z._accumulate(support * (grad - centred))

    return _result(out, (z,), "sparsemax", backward)


def entropy(p: Tensor) -> Tensor:
    """Shannon entropy (nats) along the last axis."""
    safe = p.values + ENTROPY_EPS
    out = -(p.values * np.log(safe)).sum(axis=-1)

    def backward(grad: np.ndarray) -> None:
        p._accumulate(-np.expand_dims(grad, -1) * (np.log(safe) + p.values / safe))

    return _result(out, (p,), "entropy", backward)


# =============================================================================
# Layers
# =============================================================================

@dataclass
class Pass:
    """Per-forward context: train/infer mode and the dropout generator."""
    training: bool
    rng: np.random.Generator | None = None


class Module:
    """Container of named parameters, buffers and child modules."""

    def __init__(self) -> None:
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.frozen = False

    def param(self, name: str, values: np.ndarray) -> Tensor:
        tensor = Tensor(values, requires_grad=True, op=name)
        self._params[name] = tensor
        return tensor

    def child(self, name: str, module: Module) -> Module:
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, tensor in self._params.items():
            yield prefix + name, tensor
        for name, module in self._children.items():
            yield from module.named_parameters(f"{prefix}{name}.")

    def trainable(self) -> list[Tensor]:
        """Parameters updated by the optimizer; frozen subtrees are skipped."""
        if self.frozen:
            return []
        found = list(self._params.values())
        for module in self._children.values():
            found.extend(module.trainable())
        return found

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        state = {prefix + name: t.values for name, t in self._params.items()}
        state.update({prefix + name: b for name, b in self._buffers.items()})
        for name, module in self._children.items():
            state.update(module.state_dict(f"{prefix}{name}."))
        return state

    def load_state_dict(self, state: dict[str, Any], prefix: str = "") -> None:
        for name, tensor in self._params.items():
            tensor.values = np.asarray(state[prefix + name], dtype=np.float64).reshape(tensor.shape)
        for name, buffer in self._buffers.items():
            self._buffers[name] = np.asarray(state[prefix + name], dtype=np.float64).reshape(buffer.shape)
        for name, module in self._children.items():
            module.load_state_dict(state, f"{prefix}{name}.")

    def forward(self, x: Tensor, ctx: Pass) -> Tensor:
        raise NotImplementedError


class Dense(Module):
    """x @ W + b with He-normal weights."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, scale: float | None = None) -> None:
        super().__init__()
        std = math.sqrt(2.0 / max(in_dim, 1)) if scale is None else scale
        self.weight = self.param("weight", rng.normal(0.0, std, size=(in_dim, out_dim)))
        self.bias = self.param("bias", np.zeros(out_dim))

    def zero_(self) -> None:
        self.weight.values[...] = 0.0
        self.bias.values[...] = 0.0

    def forward(self, x: Tensor, ctx: Pass) -> Tensor:
        return x @ self.weight + self.bias


class BatchNorm(Module):
    """Batch statistics in training; running statistics at inference."""

    def __init__(self, dim: int) -> None:
        super().__init__()
        self.gamma = self.param("gamma", np.ones(dim))
        self.beta = self.param("beta", np.zeros(dim))
        self._buffers["running_mean"] = np.zeros(dim)
        self._buffers["running_var"] = np.ones(dim)

    def forward(self, x: Tensor, ctx: Pass) -> Tensor:
        n = x.shape[0]
        if ctx.training and n > 1:
            out, mean, var = batch_norm(x, self.gamma, self.beta)
            unbiased = var * n / (n - 1)
            self._buffers["running_mean"] = (1 - BN_MOMENTUM) * self._buffers["running_mean"] + BN_MOMENTUM * mean
            self._buffers["running_var"] = (1 - BN_MOMENTUM) * self._buffers["running_var"] + BN_MOMENTUM * unbiased
            return out
        inv_std = 1.0 / np.sqrt(self._buffers["running_var"] + BN_EPS)
        centred = x + Tensor(-self._buffers["running_mean"])
        return centred * (self.gamma * Tensor(inv_std)) + self.beta


class Dropout(Module):
    def __init__(self, rate: float) -> None:
        super().__init__()
        self.rate = rate

    def forward(self, x: Tensor, ctx: Pass) -> Tensor:
        if not ctx.training or self.rate == 0.0 or ctx.rng is None:
            return x
        return dropout(x, ctx.rng.random(x.shape) >= self.rate, self.rate)


class LeakyReLU(Module):
    def __init__(self, slope: float) -> None:
        super().__init__()
        self.slope = slope

    def forward(self, x: Tensor, ctx: Pass) -> Tensor:
        return leaky_relu(x, self.slope)


class Sequential(Module):
    def __init__(self, layers: Sequence[Module]) -> None:
        super().__init__()
        self.layers = [self.child(str(i), layer) for i, layer in enumerate(layers)]

    def forward(self, x: Tensor, ctx: Pass) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x


class ResidualBlock(Module):
    """depth units of dense -> batch_norm -> leaky_relu -> dropout, each with a skip."""

    def __init__(self, width: int, depth: int, rate: float, slope: float, rng: np.random.Generator) -> None:
        super().__init__()
        self.units = [
            self.child(
                str(i),
                Sequential([Dense(width, width, rng), BatchNorm(width), LeakyReLU(slope), Dropout(rate)]),
            )
            for i in range(depth)
        ]

    def forward(self, x: Tensor, ctx: Pass) -> Tensor:
        for unit in self.units:
            x = x + unit.forward(x, ctx)
        return x


# =============================================================================
# Layer plans
# =============================================================================

class LayerKind(StrEnum):
    DENSE = "dense"
    BATCH_NORM = "batch_norm"
    DROPOUT = "dropout"
    LEAKY_RELU = "leaky_relu"
    RESIDUAL_BLOCK = "residual_block"
    SIGMOID_HEAD = "sigmoid_head"


@dataclass(frozen=True)
class LayerSpec:
    """One step of a feed-forward plan."""
    kind: LayerKind
    units: int | None = None
    depth: int | None = None
    rate: float | None = None
    slope: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if self.kind in (LayerKind.DENSE, LayerKind.RESIDUAL_BLOCK) and (self.units or 0) < 1:
            raise InvalidHyperparameter(f"{self.kind} needs units >= 1")
        if self.kind is LayerKind.RESIDUAL_BLOCK and (self.depth or 0) < 1:
            raise InvalidHyperparameter("residual_block needs depth >= 1")
        if self.kind is LayerKind.DROPOUT and not (self.rate is not None and 0.0 <= self.rate < 1.0):
            raise InvalidHyperparameter(f"dropout rate must be in [0, 1), got {self.rate}")
        if self.kind is LayerKind.LEAKY_RELU and (self.slope is None or self.slope < 0):
            raise InvalidHyperparameter("leaky_relu needs a non-negative slope")


def build_layers(plan: Sequence[LayerSpec], in_dim: int, rng: np.random.Generator) -> tuple[Sequential, int]:
    """Instantiate a plan; returns the stack and its output width."""
    layers: list[Module] = []
    width = in_dim
    for spec in plan:
        match spec.kind:
            case LayerKind.DENSE:
                layers.append(Dense(width, spec.units, rng))
                width = spec.units
            case LayerKind.BATCH_NORM:
                layers.append(BatchNorm(width))
            case LayerKind.DROPOUT:
                layers.append(Dropout(spec.rate))
            case LayerKind.LEAKY_RELU:
                layers.append(LeakyReLU(spec.slope))
            case LayerKind.RESIDUAL_BLOCK:
                if width != spec.units:
                    layers.append(Dense(width, spec.units, rng))
                    width = spec.units
                rate = DROPOUT_RATE if spec.rate is None else spec.rate
                slope = LEAKY_SLOPE if spec.slope is None else spec.slope
                layers.append(ResidualBlock(width, spec.depth, rate, slope, rng))
            case LayerKind.SIGMOID_HEAD:
                layers.append(Dense(width, 1, rng))
                width = 1
    return Sequential(layers), width


# =============================================================================
# Architectures
# =============================================================================

class Arch(StrEnum):
    DNN = "dnn"
    RESNET_MLP = "resnet_mlp"
    WIDE_DEEP = "wide_deep"
    TABNET_LITE = "tabnet_lite"


@dataclass(frozen=True)
class TabNetLiteSpec:
    n_steps: int = TABNET_STEPS
    feature_dim: int = TABNET_FEATURE_DIM
    sparsity: float = TABNET_SPARSITY
    relax: float = TABNET_RELAX

    def __post_init__(self) -> None:
        if self.n_steps < 1 or self.feature_dim < 1:
            raise InvalidHyperparameter("TabNet-lite needs n_steps >= 1 and feature_dim >= 1")
        if self.relax < 1.0:
            raise InvalidHyperparameter(f"prior relaxation must be >= 1, got {self.relax}")
        if self.sparsity < 0.0:
            raise InvalidHyperparameter("sparsity weight must be >= 0")


@dataclass(frozen=True)
class NnSpec:
    """Architecture sizes shared by the four networks."""
    widths: tuple[int, ...] = DNN_WIDTHS
    res_width: int = RESNET_WIDTH
    res_depth: int = RESNET_DEPTH
    dropout: float = DROPOUT_RATE
    slope: float = LEAKY_SLOPE
    freeze_deep: bool = False
    tabnet: TabNetLiteSpec = field(default_factory=TabNetLiteSpec)

    def __post_init__(self) -> None:
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if isinstance(self.tabnet, dict):
            object.__setattr__(self, "tabnet", TabNetLiteSpec(**self.tabnet))
        if not self.widths or min(self.widths) < 1:
            raise InvalidHyperparameter("widths must be a non-empty list of positive sizes")
        if not 0.0 <= self.dropout < 1.0:
            raise InvalidHyperparameter(f"dropout must be in [0, 1), got {self.dropout}")

    def dnn_plan(self, head: bool = True) -> list[LayerSpec]:
        plan: list[LayerSpec] = []
        for width in self.widths:
            plan += [
                LayerSpec(LayerKind.DENSE, units=width),
                LayerSpec(LayerKind.BATCH_NORM),
                LayerSpec(LayerKind.LEAKY_RELU, slope=self.slope),
                LayerSpec(LayerKind.DROPOUT, rate=self.dropout),
            ]
        if head:
            plan.append(LayerSpec(LayerKind.SIGMOID_HEAD))
        return plan

    def resnet_plan(self) -> list[LayerSpec]:
        return [
            LayerSpec(LayerKind.DENSE, units=self.res_width),
            LayerSpec(LayerKind.BATCH_NORM),
            LayerSpec(LayerKind.LEAKY_RELU, slope=self.slope),
            LayerSpec(
                LayerKind.RESIDUAL_BLOCK,
                units=self.res_width,
                depth=self.res_depth,
                rate=self.dropout,
                slope=self.slope,
            ),
            LayerSpec(LayerKind.SIGMOID_HEAD),
        ]

    def to_dict(self) -> dict[str, Any]:
        payload = asdict(self)
        payload["widths"] = list(self.widths)
        return payload


class Network(Module):
    """Maps a feature batch to one logit per row, plus an optional penalty."""
    arch: ClassVar[Arch]

    def logits(self, x: Tensor, ctx: Pass) -> tuple[Tensor, Tensor | None]:
        raise NotImplementedError


class PlanNetwork(Network):
    def __init__(self, arch: Arch, plan: Sequence[LayerSpec], in_dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.arch = arch
        stack, _ = build_layers(plan, in_dim, rng)
        self.body = self.child("body", stack)

    def logits(self, x: Tensor, ctx: Pass) -> tuple[Tensor, Tensor | None]:
        out = self.body.forward(x, ctx)
        return out.reshape(x.shape[0]), None


class WideDeepNetwork(Network):
    """Linear path on the raw features plus a deep path, summed before the sigmoid."""
    arch = Arch.WIDE_DEEP

    def __init__(self, spec: NnSpec, in_dim: int, rng: np.random.Generator) -> None:
        super().__init__()
        self.wide = self.child("wide", Dense(in_dim, 1, rng, scale=0.01))
        stack, width = build_layers(spec.dnn_plan(head=False), in_dim, rng)
        self.deep = self.child("deep", stack)
        self.deep_head = self.child("deep_head", Dense(width, 1, rng))
        if spec.freeze_deep:
            self.deep_head.zero_()
            self.deep.frozen = True
            self.deep_head.frozen = True

    def logits(self, x: Tensor, ctx: Pass) -> tuple[Tensor, Tensor | None]:
        n = x.shape[0]
        wide = self.wide.forward(x, ctx).reshape(n)
        deep = self.deep_head.forward(self.deep.forward(x, ctx), ctx).reshape(n)
        return wide + deep, None


class TabNetLite(Network):
    """
    Sequential attention over the inputs.

    Each step computes mask = sparsemax(attention(prev) * prior), feeds
    x * mask through a shared dense block and relaxes the prior with
    prior * (relax - mask). Step outputs are summed into the head.
    Features whose prior reached zero are excluded from later masks.
    """
    arch = Arch.TABNET_LITE

    def __init__(self, spec: TabNetLiteSpec, in_dim: int, slope: float, rng: np.random.Generator) -> None:
        super().__init__()
        self.spec = spec
        self.slope = slope
        self.attention = [
            self.child(
                f"attention{t}",
                Dense(in_dim if t == 0 else spec.feature_dim, in_dim, rng, scale=ATTENTION_INIT_SCALE),
            )
            for t in range(spec.n_steps)
        ]
        self.shared = self.child("shared", Dense(in_dim, spec.feature_dim, rng))
        self.shared_bn = self.child("shared_bn", BatchNorm(spec.feature_dim))
        self.head = self.child("head", Dense(spec.feature_dim, 1, rng))

    def step_masks(self, x: Tensor, ctx: Pass) -> tuple[Tensor, list[Tensor]]:
        n, p = x.shape
        prior = Tensor(np.ones((n, p)))
        attended = x
        aggregate: Tensor | None = None
        masks: list[Tensor] = []
        for attention in self.attention:
            blocked = np.where(prior.values <= 0.0, BLOCKED_LOGIT, 0.0)
            mask = sparsemax(attention.forward(attended, ctx) * prior + Tensor(blocked))
            masks.append(mask)
            hidden = leaky_relu(self.shared_bn.forward(self.shared.forward(x * mask, ctx), ctx), self.slope)
            aggregate = hidden if aggregate is None else aggregate + hidden
            prior = prior * (mask * -1.0 + self.spec.relax)
            attended = hidden
        return aggregate, masks

    def logits(self, x: Tensor, ctx: Pass) -> tuple[Tensor, Tensor | None]:
        aggregate, masks = self.step_masks(x, ctx)
        out = self.head.forward(aggregate, ctx).reshape(x.shape[0])
        if self.spec.sparsity == 0.0:
            return out, None
        penalty = entropy(masks[0]).mean()
        for mask in masks[1:]:
            penalty = penalty + entropy(mask).mean()
        return out, penalty * (self.spec.sparsity / len(masks))


def build_network(arch: Arch | str, in_dim: int, spec: NnSpec, rng: np.random.Generator) -> Network:
    arch = Arch(arch)
    match arch:
        case Arch.DNN:
            return PlanNetwork(arch, spec.dnn_plan(), in_dim, rng)
        case Arch.RESNET_MLP:
            return PlanNetwork(arch, spec.resnet_plan(), in_dim, rng)
        case Arch.WIDE_DEEP:
            return WideDeepNetwork(spec, in_dim, rng)
        case Arch.TABNET_LITE:
            return TabNetLite(spec.tabnet, in_dim, spec.slope, rng)


# =============================================================================
# Training
# =============================================================================

@dataclass(eq=False)
class NnModel(TrainedModel):
    """A trained network in inference mode."""
    kind: ClassVar[str] = "nn"
    arch: Arch
    spec: NnSpec
    network: Network
    input_width: int
    loss_curve: list[float] = field(default_factory=list)

    @property
    def n_features(self) -> int:
        return self.input_width

    def logits(self, features: np.ndarray) -> np.ndarray:
        rows = self._check_width(features)
        out, _ = self.network.logits(Tensor(rows), Pass(training=False))
        return out.values

    def score(self, features: np.ndarray) -> np.ndarray:
        return special.expit(self.logits(features))

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "arch": str(self.arch),
            "spec": self.spec.to_dict(),
            "input_width": self.input_width,
            "state": {name: values.tolist() for name, values in self.network.state_dict().items()},
            "loss_curve": list(self.loss_curve),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> NnModel:
        spec = NnSpec(**payload["spec"])
        width = int(payload["input_width"])
        network = build_network(payload["arch"], width, spec, np.random.default_rng(0))
        network.load_state_dict(payload["state"])
        return cls(
            arch=Arch(payload["arch"]),
            spec=spec,
            network=network,
            input_width=width,
            loss_curve=[float(v) for v in payload.get("loss_curve", [])],
        )


def learning_rate_at(epoch: int, epochs: int, lr: float) -> float:
    """Halve the rate after each quarter of the schedule."""
    quarter = max(epochs // 4, 1)
    return lr * 0.5 ** min(epoch // quarter, 3)


def fit_nn(
    ds: Dataset,
    arch: Arch | str = Arch.DNN,
    spec: NnSpec | None = None,
    epochs: int = NN_EPOCHS,
    batch_size: int = NN_BATCH_SIZE,
    lr: float = NN_LEARNING_RATE,
    seed: int | None = DEFAULT_SEED,
    pos_weight: float | str | None = None,
    momentum: float = NN_MOMENTUM,
) -> NnModel:
    """
    Train a network on binary cross-entropy with mini-batch SGD and momentum.

    Args:
        ds: Standardized training data
        arch: dnn, resnet_mlp, wide_deep or tabnet_lite
        spec: Layer sizes (defaults when None)
        epochs: Passes over the data
        batch_size: Rows per gradient step
        lr: Initial learning rate, halved after each quarter of the epochs
        seed: Seeds initialization, shuffling and dropout masks
        pos_weight: Positive-class loss weight; "balanced" uses n_neg/n_pos

    Returns:
        NnModel

    Raises:
        DivergenceDetected: The loss became NaN or infinite
    """
    arch = Arch(arch)
    spec = spec or NnSpec()
    if epochs < 1 or batch_size < 1 or lr <= 0.0:
        raise InvalidHyperparameter("epochs and batch_size must be >= 1 and lr > 0")
    if not 0.0 <= momentum < 1.0:
        raise InvalidHyperparameter(f"momentum must be in [0, 1), got {momentum}")

    n_pos = int(ds.labels.sum())
    if pos_weight == "balanced":
        weight = (ds.n_rows - n_pos) / n_pos if n_pos else 1.0
    else:
        weight = float(pos_weight) if pos_weight is not None else 1.0

    rng = np.random.default_rng(seed)
    network = build_network(arch, ds.n_cols, spec, rng)
    params = network.trainable()
    velocity = [np.zeros_like(p.values) for p in params]
    labels = ds.labels.astype(np.float64)
    n_batches = max(math.ceil(ds.n_rows / batch_size), 1)
    curve: list[float] = []

    _LOGGER.info(
        "Training %s: %d epochs, batch %d, lr %.3g, momentum %.2f, pos_weight %.3g",
        arch, epochs, batch_size, lr, momentum, weight,
    )
    for epoch in range(epochs):
        rate = learning_rate_at(epoch, epochs, lr)
        order = rng.permutation(ds.n_rows)
        epoch_loss = 0.0
        for batch_no, batch in enumerate(np.array_split(order, n_batches)):
            if batch.size == 0:
                continue
            out, penalty = network.logits(Tensor(ds.features[batch]), Pass(training=True, rng=rng))
            loss = bce_with_logits(out, labels[batch], weight)
            if penalty is not None:
                loss = loss + penalty
            value = float(loss.values)
            if not math.isfinite(value):
                raise DivergenceDetected(
                    f"{arch} loss became {value} at epoch {epoch}, batch {batch_no} (lr {rate:.3g})"
                )
            loss.backward()
            for param, vel in zip(params, velocity):
                vel *= momentum
                vel -= rate * param.grad
                param.values += vel
            epoch_loss += value * batch.size
        curve.append(epoch_loss / ds.n_rows)
        _LOGGER.debug("%s epoch %d loss %.5f", arch, epoch, curve[-1])

    return NnModel(arch=arch, spec=spec, network=network, input_width=ds.n_cols, loss_curve=curve)


def tabnet_masks(model: TrainedModel, ds: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """
    Per-row, per-step attention masks and the global feature importance.

    Returns:
        masks of shape (n_rows, n_steps, n_features) and an importance
        vector (step-aggregated mask mass, normalized to sum 1)

    Raises:
        WrongArchitecture: The model is not tabnet_lite
    """
    if not isinstance(model, NnModel) or model.arch is not Arch.TABNET_LITE:
        raise WrongArchitecture(f"tabnet_masks needs a tabnet_lite model, got {getattr(model, 'arch', model.kind)}")
    rows = model._check_width(ds.features)
    _, masks = model.network.step_masks(Tensor(rows), Pass(training=False))
    stacked = np.stack([m.values for m in masks], axis=1)
    mass = stacked.sum(axis=(0, 1))
    return stacked, mass / mass.sum()
