"""Gaussian mechanism for client activations.

Calibrates the noise scale from a per-client privacy budget, perturbs
activation matrices with stored standard-normal draws (kept so the
budget adaptation can differentiate through the noise), provides the
analytic derivative of the perturbed activation with respect to the
privacy parameter, and reports signal-to-noise ratios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass
class PrivacyBudget:
    """Per-client (epsilon, delta, sensitivity) with adaptation bounds.

    epsilon always stays inside [eps_lower, eps_upper]; use clamp() for
    any mutation so the invariant cannot be broken.
    """

    epsilon: float
    delta: float = 0.01
    sensitivity: float = 0.1
    step_size: float = 0.05
    eps_lower: float = 0.5
    eps_upper: float = 5.0

    def __post_init__(self) -> None:
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")
        if self.sensitivity <= 0.0:
            raise ValueError("sensitivity must be positive")
        if self.step_size < 0.0:
            raise ValueError("step_size must be >= 0")
        if not 0.0 < self.eps_lower <= self.eps_upper:
            raise ValueError("need 0 < eps_lower <= eps_upper")
        if not self.eps_lower <= self.epsilon <= self.eps_upper:
            raise ValueError(
                f"epsilon {self.epsilon} outside [{self.eps_lower}, {self.eps_upper}]"
            )

    def clamp(self, value: float) -> float:
        """Project a proposed epsilon back into [eps_lower, eps_upper]."""
        return min(self.eps_upper, max(self.eps_lower, value))


@dataclass
class NoiseRecord:
    """The standard-normal draw and scale used for one perturbation."""

    draw: np.ndarray  # r, same shape as the activation
    sigma: float


def calibrate_sigma(budget: PrivacyBudget) -> float:
    """Noise scale sigma = sqrt(2 ln(1.25/delta)) * sensitivity / epsilon.

    Raises:
        ValueError: if delta >= 1.25 (the logarithm would be nonpositive).
    """
    if budget.delta >= 1.25:
        raise ValueError("invalid budget: delta >= 1.25 gives nonpositive log")
    return math.sqrt(2.0 * math.log(1.25 / budget.delta)) * budget.sensitivity / budget.epsilon


def perturb(
    activation: np.ndarray,
    budget: PrivacyBudget,
    rng: np.random.Generator,
) -> tuple[np.ndarray, NoiseRecord]:
    """Apply the Gaussian mechanism: activation + sigma * r, r ~ N(0, 1).

    The raw draw r is returned in the NoiseRecord so the round's epsilon
    adaptation can reuse exactly the noise that was injected.
    """
    activation = np.asarray(activation, dtype=np.float64)
    if not np.isfinite(activation).all():
        raise ValueError("activation must be finite")
    sigma = calibrate_sigma(budget)
    draw = rng.standard_normal(activation.shape)
    return activation + sigma * draw, NoiseRecord(draw=draw, sigma=sigma)


def noise_grad_epsilon(record: NoiseRecord, budget: PrivacyBudget) -> np.ndarray:
    """d(perturbed activation)/d(epsilon) for the stored draw.

    Equals -r * sqrt(2 ln(1.25/delta)) * sensitivity / epsilon**2: raising
    epsilon shrinks the injected noise along the recorded direction.
    """
    if record.draw is None:
        raise ValueError("noise record is missing its draw")
    scale = math.sqrt(2.0 * math.log(1.25 / budget.delta)) * budget.sensitivity
    return -record.draw * scale / budget.epsilon**2


def snr_db(clean: np.ndarray, noise: np.ndarray) -> float:
    """10 * log10(signal energy / noise energy).

    Raises:
        ValueError: on shape mismatch or exactly zero noise.
    """
    clean = np.asarray(clean, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if clean.shape != noise.shape:
        raise ValueError("clean and noise must have the same shape")
    noise_energy = float(np.sum(noise**2))
    if noise_energy == 0.0:
        raise ValueError("noise is exactly zero; SNR undefined")
    return 10.0 * math.log10(float(np.sum(clean**2)) / noise_energy)
