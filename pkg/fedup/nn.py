"""
Minimal deterministic neural-network core.

Provides dense and 2D-convolutional layers, an elementwise affine layer
(kind "other", trainable but never pruned), ReLU hidden activations,
softmax cross-entropy, backprop gradients, Adam and evaluation.

Parameters are flat float32 arrays in row-major order. Every operation
returns new arrays; nothing is mutated in place.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import log_softmax

from .errors import (
    ConfigurationError,
    IntegrityError,
    NumericalError,
    UndefinedSimilarityError,
    UsageError,
)

logger = logging.getLogger(__name__)


# ============================================================================
# Parameter containers
# ============================================================================

class LayerKind(str, Enum):
    DENSE = "dense"
    CONV2D = "conv2d"
    OTHER = "other"


PRUNABLE_KINDS = (LayerKind.DENSE, LayerKind.CONV2D)


@dataclass
class LayerParams:
    """
    One layer of a model.

    `shape` is the weight shape: (out, in) for dense, (out_channels,
    in_channels, k, k) for conv2d and the input shape for the elementwise
    affine layer. Biases have one entry per output unit / channel / feature.
    """

    kind: LayerKind
    shape: Tuple[int, ...]
    input_shape: Tuple[int, ...]
    output_shape: Tuple[int, ...]
    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.kind = LayerKind(self.kind)
        self.shape = tuple(int(d) for d in self.shape)
        self.input_shape = tuple(int(d) for d in self.input_shape)
        self.output_shape = tuple(int(d) for d in self.output_shape)
        self.weights = np.asarray(self.weights).reshape(-1)
        self.biases = np.asarray(self.biases).reshape(-1)
        if self.weights.size != int(np.prod(self.shape)):
            raise IntegrityError(
                f"{self.kind.value} layer declares shape {self.shape} "
                f"but holds {self.weights.size} weights"
            )

    @property
    def prunable(self) -> bool:
        return self.kind in PRUNABLE_KINDS

    @property
    def weight_count(self) -> int:
        return int(self.weights.size)

    def structure(self) -> Tuple:
        return (self.kind, self.shape, self.input_shape, self.output_shape, self.biases.size)

    def copy(self) -> "LayerParams":
        return replace(self, weights=self.weights.copy(), biases=self.biases.copy())

    def with_arrays(self, weights: np.ndarray, biases: np.ndarray) -> "LayerParams":
        return replace(self, weights=weights, biases=biases)


@dataclass
class ModelParams:
    """Ordered list of layers. The last layer is a dense logits layer."""

    layers: List[LayerParams]

    def __post_init__(self):
        if not self.layers:
            raise ConfigurationError("model needs at least one layer")
        if self.layers[-1].kind != LayerKind.DENSE:
            raise ConfigurationError("the final layer must be dense")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if int(np.prod(prev.output_shape)) != int(np.prod(nxt.input_shape)):
                raise ConfigurationError(
                    f"layer output {prev.output_shape} does not feed input {nxt.input_shape}"
                )

    @property
    def input_shape(self) -> Tuple[int, ...]:
        return self.layers[0].input_shape

    @property
    def num_classes(self) -> int:
        return self.layers[-1].output_shape[0]

    def structure(self) -> Tuple:
        return tuple(layer.structure() for layer in self.layers)

    def is_congruent(self, other: "ModelParams") -> bool:
        return self.structure() == other.structure()

    def check_congruent(self, other: "ModelParams", what: str = "models") -> None:
        if not self.is_congruent(other):
            raise IntegrityError(f"{what} are not structurally congruent")

    def prunable_layers(self) -> List[int]:
        return [i for i, layer in enumerate(self.layers) if layer.prunable]

    def parameter_count(self) -> int:
        return sum(layer.weights.size + layer.biases.size for layer in self.layers)

    def all_finite(self) -> bool:
        return all(
            np.isfinite(layer.weights).all() and np.isfinite(layer.biases).all()
            for layer in self.layers
        )

    def copy(self) -> "ModelParams":
        return ModelParams([layer.copy() for layer in self.layers])

    def astype(self, dtype) -> "ModelParams":
        return ModelParams([
            layer.with_arrays(layer.weights.astype(dtype), layer.biases.astype(dtype))
            for layer in self.layers
        ])


@dataclass
class Batch:
    """Inputs (batch x features or batch x C x H x W) and integer labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.inputs.ndim < 2 or self.inputs.shape[0] < 1:
            raise UsageError("batch must hold at least one sample")
        if self.labels.size != self.inputs.shape[0]:
            raise UsageError(
                f"batch has {self.inputs.shape[0]} inputs but {self.labels.size} labels"
            )

    def __len__(self) -> int:
        return int(self.inputs.shape[0])


# ============================================================================
# Construction
# ============================================================================

ARCHITECTURES = {
    "mlp": {
        "input_rank": 1,
        "description": "dense - ReLU - dense, for synthetic vector tasks",
    },
    "cnn": {
        "input_rank": 3,
        "description": "conv2d - ReLU - dense head, for image-shaped tasks",
    },
}


@dataclass
class ModelSpec:
    """Declarative model description, part of an experiment config."""

    arch: str = "mlp"
    input_shape: Tuple[int, ...] = (16,)
    num_classes: int = 10
    hidden: int = 64
    conv_channels: int = 4
    kernel_size: int = 3
    input_affine: bool = False

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ConfigurationError(f"Unknown architecture: {self.arch}")
        self.input_shape = tuple(int(d) for d in self.input_shape)
        if len(self.input_shape) != ARCHITECTURES[self.arch]["input_rank"]:
            raise ConfigurationError(
                f"{self.arch} expects an input of rank "
                f"{ARCHITECTURES[self.arch]['input_rank']}, got {self.input_shape}"
            )
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.arch == "mlp" and self.hidden < 1:
            raise ConfigurationError("hidden width must be >= 1")
        if self.arch == "cnn":
            _, height, width = self.input_shape
            if self.conv_channels < 1 or not 1 <= self.kernel_size <= min(height, width):
                raise ConfigurationError(
                    f"kernel {self.kernel_size} does not fit input {self.input_shape}"
                )


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, size: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=size).astype(np.float32)


def dense_layer(in_features: int, out_features: int,
                weights: Optional[np.ndarray] = None,
                biases: Optional[np.ndarray] = None) -> LayerParams:
    """Build a dense layer; arrays default to zeros."""
    shape = (out_features, in_features)
    if weights is None:
        weights = np.zeros(out_features * in_features, dtype=np.float32)
    if biases is None:
        biases = np.zeros(out_features, dtype=np.float32)
    return LayerParams(LayerKind.DENSE, shape, (in_features,), (out_features,),
                       np.asarray(weights, dtype=np.float32), np.asarray(biases, dtype=np.float32))


def conv2d_layer(input_shape: Sequence[int], out_channels: int, kernel_size: int,
                 weights: Optional[np.ndarray] = None,
                 biases: Optional[np.ndarray] = None) -> LayerParams:
    """Build a valid-padding, stride-1 conv layer; arrays default to zeros."""
    channels, height, width = (int(d) for d in input_shape)
    shape = (out_channels, channels, kernel_size, kernel_size)
    output_shape = (out_channels, height - kernel_size + 1, width - kernel_size + 1)
    if weights is None:
        weights = np.zeros(int(np.prod(shape)), dtype=np.float32)
    if biases is None:
        biases = np.zeros(out_channels, dtype=np.float32)
    return LayerParams(LayerKind.CONV2D, shape, (channels, height, width), output_shape,
                       np.asarray(weights, dtype=np.float32), np.asarray(biases, dtype=np.float32))


def affine_layer(input_shape: Sequence[int]) -> LayerParams:
    """Elementwise scale-and-shift layer initialised to the identity."""
    shape = tuple(int(d) for d in input_shape)
    size = int(np.prod(shape))
    return LayerParams(LayerKind.OTHER, shape, shape, shape,
                       np.ones(size, dtype=np.float32), np.zeros(size, dtype=np.float32))


def init_model(spec: ModelSpec, seed: int) -> ModelParams:
    """Glorot-uniform initialisation with zero biases, fully determined by the seed."""
    rng = np.random.default_rng(seed)
    layers: List[LayerParams] = []
    if spec.input_affine:
        layers.append(affine_layer(spec.input_shape))

    if spec.arch == "mlp":
        dim = spec.input_shape[0]
        hidden = dense_layer(dim, spec.hidden, _glorot(rng, dim, spec.hidden, dim * spec.hidden))
        head = dense_layer(spec.hidden, spec.num_classes,
                           _glorot(rng, spec.hidden, spec.num_classes, spec.hidden * spec.num_classes))
        layers.extend([hidden, head])
    else:
        channels = spec.input_shape[0]
        k = spec.kernel_size
        fan_in, fan_out = channels * k * k, spec.conv_channels * k * k
        conv = conv2d_layer(spec.input_shape, spec.conv_channels, k,
                            _glorot(rng, fan_in, fan_out, spec.conv_channels * fan_in))
        features = int(np.prod(conv.output_shape))
        head = dense_layer(features, spec.num_classes,
                           _glorot(rng, features, spec.num_classes, features * spec.num_classes))
        layers.extend([conv, head])

    return ModelParams(layers)


# ============================================================================
# Forward and backward passes
# ============================================================================

def _is_activated(model: ModelParams, index: int) -> bool:
    return model.layers[index].prunable and index != len(model.layers) - 1


def _forward(model: ModelParams, inputs: np.ndarray, dtype) -> Tuple[np.ndarray, List]:
    x = np.asarray(inputs, dtype=dtype)
    if x.shape[1:] != model.input_shape:
        raise ConfigurationError(
            f"input shape {x.shape[1:]} does not match model input {model.input_shape}"
        )
    batch = x.shape[0]
    caches = []
    for index, layer in enumerate(model.layers):
        x_in = x.reshape((batch,) + layer.input_shape)
        w = layer.weights.astype(dtype, copy=False).reshape(layer.shape)
        b = layer.biases.astype(dtype, copy=False)
        if layer.kind == LayerKind.DENSE:
            z = x_in @ w.T + b
        elif layer.kind == LayerKind.CONV2D:
            k = layer.shape[2]
            windows = sliding_window_view(x_in, (k, k), axis=(2, 3))
            z = np.einsum("bchwij,ocij->bohw", windows, w) + b[None, :, None, None]
        else:
            z = x_in * w + b.reshape(layer.input_shape)
        activated = _is_activated(model, index)
        caches.append((x_in, z, activated))
        x = np.maximum(z, 0) if activated else z
    return x.reshape(batch, -1), caches


def forward(model: ModelParams, batch: Batch) -> np.ndarray:
    """Return the batch_size x num_classes logits."""
    logits, _ = _forward(model, batch.inputs, np.float32)
    return logits


def _cross_entropy(logits: np.ndarray, labels: np.ndarray, num_classes: int) -> Tuple[float, np.ndarray]:
    if labels.min() < 0 or labels.max() >= num_classes:
        raise UsageError(f"labels must lie in [0, {num_classes})")
    rows = np.arange(logits.shape[0])
    log_probs = log_softmax(logits, axis=1)
    loss = -log_probs[rows, labels].mean()
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1
    dlogits /= logits.shape[0]
    return float(loss), dlogits


def _conv_input_grad(delta: np.ndarray, w: np.ndarray, input_shape: Tuple[int, ...]) -> np.ndarray:
    dx = np.zeros(input_shape, dtype=delta.dtype)
    k = w.shape[2]
    out_h, out_w = delta.shape[2:]
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + out_h, j:j + out_w] += np.einsum("bohw,oc->bchw", delta, w[:, :, i, j])
    return dx


def loss_and_gradients(model: ModelParams, batch: Batch,
                       dtype=np.float32) -> Tuple[float, List[Tuple[np.ndarray, np.ndarray]]]:
    """
    Mean cross-entropy and its gradient for every layer.

    Args:
        model: Parameters to differentiate
        batch: Inputs and labels
        dtype: Arithmetic precision; float64 gives the shadow computation
               used by the finite-difference oracle

    Returns:
        (loss, [(d_weights, d_biases) per layer]) with flat gradient arrays
    """
    logits, caches = _forward(model, batch.inputs, dtype)
    loss, delta = _cross_entropy(logits, batch.labels, model.num_classes)

    grads: List[Tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)
    for index in reversed(range(len(model.layers))):
        layer = model.layers[index]
        x_in, z, activated = caches[index]
        delta = delta.reshape(z.shape)
        if activated:
            delta = delta * (z > 0)
        w = layer.weights.astype(dtype, copy=False).reshape(layer.shape)
        if layer.kind == LayerKind.DENSE:
            d_w = delta.T @ x_in
            d_b = delta.sum(axis=0)
            d_x = delta @ w
        elif layer.kind == LayerKind.CONV2D:
            k = layer.shape[2]
            windows = sliding_window_view(x_in, (k, k), axis=(2, 3))
            d_w = np.einsum("bohw,bchwij->ocij", delta, windows)
            d_b = delta.sum(axis=(0, 2, 3))
            d_x = _conv_input_grad(delta, w, x_in.shape)
        else:
            d_w = (delta * x_in).sum(axis=0)
            d_b = delta.sum(axis=0)
            d_x = delta * w
        grads[index] = (d_w.reshape(-1), d_b.reshape(-1))
        delta = d_x
    return loss, grads


def loss(model: ModelParams, batch: Batch, dtype=np.float32) -> float:
    """Mean cross-entropy of the batch."""
    logits, _ = _forward(model, batch.inputs, dtype)
    value, _ = _cross_entropy(logits, batch.labels, model.num_classes)
    return value


# ============================================================================
# Optimizer
# ============================================================================

@dataclass
class OptimizerState:
    """Adam moments congruent with a model, plus the step counter."""

    first_moments: List[Tuple[np.ndarray, np.ndarray]]
    second_moments: List[Tuple[np.ndarray, np.ndarray]]
    step: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, model: ModelParams, learning_rate: float = 1e-3) -> "OptimizerState":
        def zeros():
            return [(np.zeros_like(layer.weights, dtype=np.float32),
                     np.zeros_like(layer.biases, dtype=np.float32)) for layer in model.layers]
        return cls(zeros(), zeros(), 0, learning_rate)

    def check_congruent(self, model: ModelParams) -> None:
        sizes = [(layer.weights.size, layer.biases.size) for layer in model.layers]
        for moments in (self.first_moments, self.second_moments):
            if [(m_w.size, m_b.size) for m_w, m_b in moments] != sizes:
                raise IntegrityError("optimizer state is not congruent with the model")


def _diagnose(model: ModelParams) -> str:
    norms = [f"{layer.kind.value}[{i}]={float(np.linalg.norm(layer.weights)):.3g}"
             for i, layer in enumerate(model.layers)]
    return "weight norms " + ", ".join(norms)


def train_step(model: ModelParams, opt: OptimizerState,
               batch: Batch) -> Tuple[ModelParams, OptimizerState, float]:
    """One Adam step on the mean cross-entropy of the batch; returns new copies."""
    opt.check_congruent(model)
    loss_value, grads = loss_and_gradients(model, batch)
    if not math.isfinite(loss_value):
        raise NumericalError(
            f"non-finite loss {loss_value} at step {opt.step + 1}; {_diagnose(model)}"
        )

    step = opt.step + 1
    b1, b2 = opt.beta1, opt.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step

    def update(param, grad, m, v):
        m_new = (b1 * m + (1.0 - b1) * grad).astype(np.float32)
        v_new = (b2 * v + (1.0 - b2) * grad * grad).astype(np.float32)
        m_hat = m_new / correction1
        v_hat = v_new / correction2
        p_new = (param - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.eps)).astype(np.float32)
        return p_new, m_new, v_new

    layers, first, second = [], [], []
    for layer, (g_w, g_b), (m_w, m_b), (v_w, v_b) in zip(
            model.layers, grads, opt.first_moments, opt.second_moments):
        w_new, m_w_new, v_w_new = update(layer.weights, g_w, m_w, v_w)
        b_new, m_b_new, v_b_new = update(layer.biases, g_b, m_b, v_b)
        layers.append(layer.with_arrays(w_new, b_new))
        first.append((m_w_new, m_b_new))
        second.append((v_w_new, v_b_new))

    new_model = ModelParams(layers)
    if not new_model.all_finite():
        raise NumericalError(f"non-finite parameters after step {step}; {_diagnose(new_model)}")
    return new_model, replace(opt, first_moments=first, second_moments=second, step=step), loss_value


# ============================================================================
# Evaluation
# ============================================================================

def predict(model: ModelParams, inputs: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Argmax class per sample; ties go to the lowest class index."""
    predictions = []
    for start in range(0, inputs.shape[0], batch_size):
        logits, _ = _forward(model, inputs[start:start + batch_size], np.float32)
        predictions.append(np.argmax(logits, axis=1))
    return np.concatenate(predictions) if predictions else np.zeros(0, dtype=np.int64)


def evaluate(model: ModelParams, dataset) -> float:
    """Fraction of samples whose predicted class equals the label."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate on an empty dataset")
    predictions = predict(model, dataset.inputs)
    return float(np.mean(predictions == dataset.labels))


def last_layer_cosine_similarity(a: ModelParams, b: ModelParams) -> float:
    """Cosine of the flattened final-layer weight arrays, in 64-bit arithmetic."""
    a.check_congruent(b)
    va = a.layers[-1].weights.astype(np.float64)
    vb = b.layers[-1].weights.astype(np.float64)
    na, nb = float(np.linalg.norm(va)), float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        raise UndefinedSimilarityError("cosine similarity of a zero-norm final layer is undefined")
    return float(np.clip(np.dot(va, vb) / (na * nb), -1.0, 1.0))
