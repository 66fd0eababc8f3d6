"""Minimal dense-layer networks with exact forward/backward passes.

Float64 throughout. Supports the small fully connected architectures the
simulator needs: client bottom models (e.g. input -> 128 ReLU -> embedding)
and server heads (linear, or with hidden ReLU layers), trained with plain
SGD on multiclass softmax cross-entropy.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


@dataclass
class DenseLayer:
    """One affine layer: y = act(x @ weights + bias)."""

    weights: np.ndarray  # (in_dim, out_dim)
    bias: np.ndarray  # (out_dim,)
    activation: str = "identity"

    def __post_init__(self) -> None:
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[1],):
            raise ValueError("inconsistent layer shapes")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[1]


@dataclass
class Mlp:
    """A stack of dense layers with chaining dimensions."""

    layers: list[DenseLayer]

    def __post_init__(self) -> None:
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ValueError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(layer.weights, layer.bias) for layer in self.layers]


@dataclass
class ForwardTape:
    """Cached intermediates of one forward pass, valid for one backward pass."""

    model: Mlp
    inputs: list[np.ndarray]  # input to each layer
    pre_activations: list[np.ndarray]
    batch_size: int
    consumed: bool = field(default=False)


def init_mlp(
    layer_dims: list[int],
    activations: list[str],
    rng: np.random.Generator,
) -> Mlp:
    """Build an Mlp with Glorot-uniform weights and zero bias.

    Args:
        layer_dims: [in, h1, ..., out]; one layer per consecutive pair.
        activations: activation name per layer (len = len(layer_dims) - 1).
        rng: stream the weights are drawn from.
    """
    if len(activations) != len(layer_dims) - 1:
        raise ValueError("need one activation per layer")
    layers = []
    for fan_in, fan_out, act in zip(layer_dims, layer_dims[1:], activations):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(weights, np.zeros(fan_out), act))
    return Mlp(layers)


def mlp_for_classifier(
    in_dim: int,
    hidden: tuple[int, ...],
    out_dim: int,
    rng: np.random.Generator,
) -> Mlp:
    """ReLU hidden layers followed by an identity output layer."""
    dims = [in_dim, *hidden, out_dim]
    acts = ["relu"] * len(hidden) + ["identity"]
    return init_mlp(dims, acts, rng)


def forward(model: Mlp, x: np.ndarray) -> tuple[np.ndarray, ForwardTape]:
    """Run the model on a batch and cache intermediates for backward.

    Args:
        x: (batch, in_dim) input.

    Returns:
        (output, tape) with output of shape (batch, out_dim).

    Raises:
        ValueError: on shape mismatch or non-finite output.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.in_dim:
        raise ValueError(f"input has shape {x.shape}, expected (*, {model.in_dim})")
    inputs: list[np.ndarray] = []
    pres: list[np.ndarray] = []
    current = x
    for layer in model.layers:
        inputs.append(current)
        pre = current @ layer.weights + layer.bias
        pres.append(pre)
        current = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    if not np.isfinite(current).all():
        raise ValueError("non-finite forward output")
    tape = ForwardTape(model=model, inputs=inputs, pre_activations=pres, batch_size=x.shape[0])
    return current, tape


def backward(
    model: Mlp,
    tape: ForwardTape,
    grad_output: np.ndarray,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Backpropagate grad_output through the taped forward pass.

    Args:
        grad_output: gradient of the loss with respect to the forward
            output, same shape as that output.

    Returns:
        (param_grads, grad_input) where param_grads is one (dW, db) pair
        per layer and grad_input is the loss gradient with respect to the
        model input -- the quantity the server sends back to each client.

    Raises:
        ValueError: if the tape was already consumed or belongs to a
            different model, or grad_output has the wrong shape.
    """
    if tape.consumed:
        raise ValueError("tape already consumed by a previous backward pass")
    if tape.model is not model:
        raise ValueError("tape does not belong to this model")
    grad_output = np.asarray(grad_output, dtype=np.float64)
    expected = (tape.batch_size, model.out_dim)
    if grad_output.shape != expected:
        raise ValueError(f"grad_output has shape {grad_output.shape}, expected {expected}")
    tape.consumed = True

    param_grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(model.layers)  # type: ignore[list-item]
    grad = grad_output
    for k in range(len(model.layers) - 1, -1, -1):
        layer = model.layers[k]
        if layer.activation == "relu":
            grad = grad * (tape.pre_activations[k] > 0.0)
        d_weights = tape.inputs[k].T @ grad
        d_bias = grad.sum(axis=0)
        param_grads[k] = (d_weights, d_bias)
        grad = grad @ layer.weights.T
    return param_grads, grad


def sgd_step(
    model: Mlp,
    param_grads: list[tuple[np.ndarray, np.ndarray]],
    learning_rate: float,
) -> None:
    """In-place SGD update: param -= learning_rate * grad.

    Raises:
        ValueError: if learning_rate <= 0 or any gradient is non-finite.
    """
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    for layer, (d_weights, d_bias) in zip(model.layers, param_grads):
        if not (np.isfinite(d_weights).all() and np.isfinite(d_bias).all()):
            raise ValueError("non-finite gradients")
        layer.weights -= learning_rate * d_weights
        layer.bias -= learning_rate * d_bias


def softmax_cross_entropy(
    logits: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, np.ndarray]:
    """Batch-mean multiclass cross-entropy and its logit gradient.

    Args:
        logits: (batch, num_classes) raw scores.
        labels: (batch,) integer class indices.

    Returns:
        (loss, grad_logits) with grad_logits = (softmax - one_hot) / batch,
        i.e. the gradient of the mean loss.

    Raises:
        ValueError: on label out of range or shape mismatch.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    m, num_classes = logits.shape
    if labels.shape != (m,):
        raise ValueError("labels must be a vector matching the batch size")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"label out of range [0, {num_classes})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    loss = float(-log_probs[np.arange(m), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(m), labels] -= 1.0
    grad /= m
    return loss, grad


def predict_classes(model: Mlp, x: np.ndarray) -> np.ndarray:
    """Argmax class predictions for a batch."""
    out, _ = forward(model, x)
    return out.argmax(axis=1)
