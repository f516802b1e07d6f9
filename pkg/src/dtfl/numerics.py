"""Dense layers, losses, and optimizers on plain numpy arrays.

Forward passes cache their inputs on the layer itself; the matching backward
consumes that cache. All math is float64 and fully deterministic.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError, ShapeError, StateError


class Activation(enum.Enum):
    RELU = "relu"
    IDENTITY = "identity"


@dataclass
class DenseCache:
    """Values saved during forward that backward needs."""

    x: np.ndarray
    pre: np.ndarray


@dataclass
class DenseLayer:
    """Affine map plus elementwise activation.

    weights has shape (out_dim, in_dim) and bias (out_dim,). The cache slot
    is transient working state, never part of the layer's identity.
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: Activation
    cache: DenseCache | None = field(default=None, repr=False, compare=False)

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


def init_dense(
    in_dim: int, out_dim: int, activation: Activation, rng: np.random.Generator
) -> DenseLayer:
    """Create a layer with uniform(-b, b) parameters, b = 1/sqrt(in_dim)."""
    if in_dim <= 0 or out_dim <= 0:
        raise InputError(f"layer dims must be positive, got {in_dim}x{out_dim}")
    bound = 1.0 / np.sqrt(in_dim)
    weights = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    bias = rng.uniform(-bound, bound, size=out_dim)
    return DenseLayer(weights, bias, activation)


def clone_layer(layer: DenseLayer) -> DenseLayer:
    """Deep copy of parameters; the cache is not carried over."""
    return DenseLayer(layer.weights.copy(), layer.bias.copy(), layer.activation)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """Compute activation(x @ W.T + b), caching inputs for backward.

    x has shape (batch, in_dim); the result is (batch, out_dim).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"expected 2-d input, got shape {x.shape}")
    if x.shape[1] != layer.in_dim:
        raise ShapeError(
            f"input width {x.shape[1]} does not match layer in_dim {layer.in_dim}"
        )
    pre = x @ layer.weights.T + layer.bias
    layer.cache = DenseCache(x=x, pre=pre)
    if layer.activation is Activation.RELU:
        return np.maximum(pre, 0.0)
    return pre


def dense_backward(
    layer: DenseLayer, grad_out: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backpropagate through the layer using the cached forward values.

    Returns (grad_x, grad_weights, grad_bias). Raises StateError when no
    forward pass has populated the cache.
    """
    if layer.cache is None:
        raise StateError("dense_backward called before dense_forward")
    grad_out = np.asarray(grad_out, dtype=np.float64)
    cache = layer.cache
    if grad_out.shape != cache.pre.shape:
        raise ShapeError(
            f"grad shape {grad_out.shape} does not match output shape {cache.pre.shape}"
        )
    if layer.activation is Activation.RELU:
        grad_pre = grad_out * (cache.pre > 0.0)
    else:
        grad_pre = grad_out
    grad_w = grad_pre.T @ cache.x
    grad_b = grad_pre.sum(axis=0)
    grad_x = grad_pre @ layer.weights
    return grad_x, grad_w, grad_b


def softmax_xent(
    logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean cross-entropy of softmax(logits) against integer labels.

    Returns (loss, grad_logits) where the gradient is of the mean loss, i.e.
    (softmax - onehot) / batch. An empty batch yields loss 0 and zero grads.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim != 2:
        raise ShapeError(f"expected 2-d logits, got shape {logits.shape}")
    if labels.ndim != 1 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(
            f"labels shape {labels.shape} does not match logits {logits.shape}"
        )
    batch, classes = logits.shape
    if batch == 0:
        return 0.0, np.zeros_like(logits)
    if labels.min() < 0 or labels.max() >= classes:
        raise InputError(f"labels must lie in [0, {classes - 1}]")
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    total = exp.sum(axis=1, keepdims=True)
    probs = exp / total
    log_probs = shifted - np.log(total)
    loss = float(-np.mean(log_probs[np.arange(batch), labels]))
    grad = probs.copy()
    grad[np.arange(batch), labels] -= 1.0
    grad /= batch
    return loss, grad


class OptimKind(enum.Enum):
    SGD = "sgd"
    ADAM = "adam"


@dataclass
class OptimState:
    """Optimizer hyperparameters plus per-parameter moment buffers.

    Moments are allocated lazily on the first step so one state object can
    serve any parameter list, as long as the list's shapes stay fixed.
    """

    kind: OptimKind
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: list[np.ndarray] | None = None
    second_moment: list[np.ndarray] | None = None

    def __post_init__(self):
        if self.learning_rate < 0:
            raise InputError(f"learning rate must be >= 0, got {self.learning_rate}")


def optimizer_step(
    state: OptimState, params: list[np.ndarray], grads: list[np.ndarray]
) -> None:
    """Update params in place from grads.

    SGD: p -= lr * g. Adam: bias-corrected moments, p -= lr * m_hat /
    (sqrt(v_hat) + eps). A zero learning rate leaves params untouched but
    still advances the step counter and moments.
    """
    if len(params) != len(grads):
        raise ShapeError(
            f"{len(params)} params but {len(grads)} grads"
        )
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param shape {p.shape} vs grad shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    state.step += 1
    if state.kind is OptimKind.SGD:
        for p, g in zip(params, grads):
            p -= state.learning_rate * g
        return
    if state.first_moment is None:
        state.first_moment = [np.zeros_like(p) for p in params]
        state.second_moment = [np.zeros_like(p) for p in params]
    if len(state.first_moment) != len(params):
        raise ShapeError("optimizer state was built for a different parameter list")
    b1, b2 = state.beta1, state.beta2
    correct1 = 1.0 - b1**state.step
    correct2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / correct1
        v_hat = v / correct2
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def sequence_forward(layers: list[DenseLayer], x: np.ndarray) -> np.ndarray:
    for layer in layers:
        x = dense_forward(layer, x)
    return x


def sequence_backward(
    layers: list[DenseLayer], grad_out: np.ndarray
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Backprop through a layer list; returns (grad_input, grads).

    grads is flat and aligned with sequence_params: [W1, b1, W2, b2, ...].
    """
    param_grads: list[np.ndarray] = []
    for layer in reversed(layers):
        grad_out, grad_w, grad_b = dense_backward(layer, grad_out)
        param_grads.append(grad_b)
        param_grads.append(grad_w)
    param_grads.reverse()
    return grad_out, param_grads


def sequence_params(layers: list[DenseLayer]) -> list[np.ndarray]:
    """Flat parameter list [W1, b1, W2, b2, ...] sharing layer storage."""
    out: list[np.ndarray] = []
    for layer in layers:
        out.append(layer.weights)
        out.append(layer.bias)
    return out


def layer_train_flops(layer: DenseLayer, batch: int) -> int:
    """Floating point ops for one training pass of one layer.

    Forward matmul, backward data grad, backward weight grad: 2*B*in*out
    each. Bias add, activation, and grad reductions: 3*B*out together.
    """
    return 6 * batch * layer.in_dim * layer.out_dim + 3 * batch * layer.out_dim


def param_count(layers: list[DenseLayer]) -> int:
    return sum(l.weights.size + l.bias.size for l in layers)


def param_bytes(layers: list[DenseLayer]) -> int:
    # float64 storage
    return 8 * param_count(layers)
