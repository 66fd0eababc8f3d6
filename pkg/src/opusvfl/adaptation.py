"""Gradient-ascent adaptation of each client's privacy parameter.

Composes the reward's sensitivity to the privacy parameter out of two
pieces: how the contribution term reacts to the injected noise (through
the global loss) and how the privacy term reacts directly. The resulting
gradient drives a clamped per-round update of epsilon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .contribution import HeadBank
from .incentive import ClientEconomics
from .privacy import PrivacyBudget


@dataclass
class EpsilonTraceEntry:
    round_index: int
    epsilon: float
    gradient: float
    clamped: bool


@dataclass
class EpsilonTrace:
    """Per-client history of the adapted privacy parameter."""

    entries: list[EpsilonTraceEntry] = field(default_factory=list)

    def append(self, round_index: int, epsilon: float, gradient: float, clamped: bool) -> None:
        self.entries.append(EpsilonTraceEntry(round_index, epsilon, gradient, clamped))


def gs_h_from_losses(
    loss_all: float,
    loo_loss_i: float,
    grad_input_slice: np.ndarray,
    econ: ClientEconomics,
) -> np.ndarray:
    """Gradient of the contribution term with respect to client i's activations.

    Only the all-clients loss depends on h_i (the leave-one-out head for i
    excludes it), so
        dS/dh_i = C**(1/a) * (-100 * loss_without_i / loss_all**2) * dloss_all/dh_i.
    Losses are batch means, so the returned matrix is the gradient of a
    batch-size-independent quantity.
    """
    if loss_all <= 0.0:
        raise ValueError("degenerate global loss <= 0")
    chain = econ.resource_fraction ** (1.0 / econ.equity_exponent) * (
        -100.0 * loo_loss_i / loss_all**2
    )
    return chain * grad_input_slice


def compute_gS_h(
    head_bank: HeadBank,
    activations: dict[int, np.ndarray],
    labels: np.ndarray,
    i: int,
    econ: ClientEconomics,
) -> np.ndarray:
    """Self-contained dS/dh_i on a batch (runs the head forward/backward)."""
    if i not in head_bank.loo_heads:
        raise ValueError(f"client {i} is not active")
    loss_all, grad_slices = head_bank.global_grad_input(activations, labels)
    loo = head_bank.loo_loss(i, activations, labels)
    return gs_h_from_losses(loss_all, loo, grad_slices[i], econ)


def grad_contribution(
    gS_h: np.ndarray,
    dh_deps: np.ndarray,
    econ: ClientEconomics,
    budget: PrivacyBudget,
) -> float:
    """Reward gradient with respect to epsilon.

    G = alpha * <dS/dh, dh/deps> + beta * d(sensitivity/epsilon)/deps.
    The inner product is the plain elementwise sum; with batch-mean losses
    feeding dS/dh it is already batch-size independent. The privacy part is
    always negative: a larger epsilon weakens the privacy reward.
    """
    gS_h = np.asarray(gS_h, dtype=np.float64)
    dh_deps = np.asarray(dh_deps, dtype=np.float64)
    if gS_h.shape != dh_deps.shape:
        raise ValueError("gS_h and dh_deps must have the same shape")
    contribution_part = float(np.sum(gS_h * dh_deps))
    privacy_part = -budget.sensitivity / budget.epsilon**2
    return econ.alpha * contribution_part + econ.beta * privacy_part


def update_epsilon(
    budget: PrivacyBudget,
    gradient: float,
    trace: EpsilonTrace | None = None,
    round_index: int = -1,
) -> float:
    """Clamped ascent step: epsilon <- clamp(epsilon + step_size * G).

    Mutates the budget in place and returns the new epsilon. With
    step_size 0 the parameter never moves, which recovers a fixed-noise
    run.
    """
    proposal = budget.epsilon + budget.step_size * gradient
    new_epsilon = budget.clamp(proposal)
    clamped = proposal != new_epsilon
    budget.epsilon = new_epsilon
    if trace is not None:
        trace.append(round_index, new_epsilon, gradient, clamped)
    return new_epsilon
