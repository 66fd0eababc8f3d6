"""Independent scalar-loop oracles used to check the vectorized code.

Everything here is written with plain Python loops and stays deliberately
separate from the library implementations it validates.
"""

from __future__ import annotations

import math

import numpy as np

from opusvfl import nn


def scalar_forward(model: nn.Mlp, x: np.ndarray) -> np.ndarray:
    """Straight-line evaluation of act(Wx + b) compositions, one entry at a time."""
    rows = [list(map(float, row)) for row in x]
    for layer in model.layers:
        out_rows = []
        for row in rows:
            out = []
            for j in range(layer.out_dim):
                total = float(layer.bias[j])
                for i in range(layer.in_dim):
                    total += row[i] * float(layer.weights[i, j])
                if layer.activation == "relu" and total < 0.0:
                    total = 0.0
                out.append(total)
            out_rows.append(out)
        rows = out_rows
    return np.array(rows)


def scalar_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """-sum(log p_y) / m computed with per-sample loops."""
    total = 0.0
    for row, label in zip(logits, labels):
        mx = max(float(v) for v in row)
        denom = sum(math.exp(float(v) - mx) for v in row)
        total -= (float(row[int(label)]) - mx) - math.log(denom)
    return total / len(labels)


def scalar_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    correct = 0
    for row, label in zip(logits, labels):
        best, best_val = 0, float(row[0])
        for j, v in enumerate(row):
            if float(v) > best_val:
                best, best_val = j, float(v)
        correct += int(best == int(label))
    return correct / len(labels)


def loss_of(model: nn.Mlp, x: np.ndarray, labels: np.ndarray) -> float:
    out, _ = nn.forward(model, x)
    loss, _ = nn.softmax_cross_entropy(out, labels)
    return loss


def finite_diff_grads(
    model: nn.Mlp,
    x: np.ndarray,
    labels: np.ndarray,
    step: float = 1e-5,
) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Central finite differences of the mean CE loss for every parameter and input."""
    param_grads = []
    for layer in model.layers:
        d_weights = np.zeros_like(layer.weights)
        for i in range(layer.weights.shape[0]):
            for j in range(layer.weights.shape[1]):
                original = layer.weights[i, j]
                layer.weights[i, j] = original + step
                up = loss_of(model, x, labels)
                layer.weights[i, j] = original - step
                down = loss_of(model, x, labels)
                layer.weights[i, j] = original
                d_weights[i, j] = (up - down) / (2 * step)
        d_bias = np.zeros_like(layer.bias)
        for j in range(layer.bias.shape[0]):
            original = layer.bias[j]
            layer.bias[j] = original + step
            up = loss_of(model, x, labels)
            layer.bias[j] = original - step
            down = loss_of(model, x, labels)
            layer.bias[j] = original
            d_bias[j] = (up - down) / (2 * step)
        param_grads.append((d_weights, d_bias))

    grad_input = np.zeros_like(x)
    for r in range(x.shape[0]):
        for c in range(x.shape[1]):
            original = x[r, c]
            x[r, c] = original + step
            up = loss_of(model, x, labels)
            x[r, c] = original - step
            down = loss_of(model, x, labels)
            x[r, c] = original
            grad_input[r, c] = (up - down) / (2 * step)
    return param_grads, grad_input


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max elementwise relative error with an absolute floor for tiny values."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = np.maximum(np.abs(a) + np.abs(b), 1e-8)
    return float(np.max(np.abs(a - b) / scale))


class FixedNormal:
    """Stub generator whose standard_normal returns a preset matrix."""

    def __init__(self, value: np.ndarray | float) -> None:
        self.value = value

    def standard_normal(self, shape) -> np.ndarray:
        if np.isscalar(self.value):
            return np.full(shape, float(self.value))
        assert self.value.shape == tuple(shape)
        return self.value.copy()
