"""Rewards, token distribution, utilities, and dropout economics.

Per-round client rewards combine a contribution term (importance weighted
by invested resources) and a privacy term (sensitivity over epsilon).
Tokens are distributed proportionally to rewards out of a server budget,
with a round-robin bonus while budget remains; clients whose utility
(tokens minus cost) goes negative after the warm-up phase leave the
federation permanently.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .privacy import PrivacyBudget

log = logging.getLogger(__name__)


@dataclass
class ClientEconomics:
    """Per-client economic parameters plus the server-wide tuning weights."""

    resource_fraction: float = 1.0  # C, share of the client's budget spent per round
    cost_per_round: float = 1.0  # B
    equity_exponent: float = 2.0  # a, server-wide
    alpha: float = 1.0
    beta: float = 10.0

    def __post_init__(self) -> None:
        if self.resource_fraction <= 0.0:
            raise ValueError("resource_fraction must be positive")
        if self.cost_per_round < 0.0:
            raise ValueError("cost_per_round must be >= 0")
        if self.equity_exponent <= 0.0:
            raise ValueError("equity_exponent must be positive")
        # zero is allowed so limit cases (e.g. contribution-only rewards)
        # stay expressible; negatives never make sense
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be nonnegative")


def reward(
    importance: float, econ: ClientEconomics, budget: PrivacyBudget
) -> tuple[float, float, float]:
    """Per-round reward triple (S, P, R).

    S = max(importance, 0) * C**(1/a)   -- contribution term
    P = sensitivity / epsilon           -- privacy term
    R = alpha * S + beta * P

    Negative importance is floored to zero here only; the contribution
    logs keep the raw value.
    """
    floored = max(importance, 0.0)
    if importance < 0.0:
        log.debug("negative importance %.4f floored to 0 for reward", importance)
    contribution_term = floored * econ.resource_fraction ** (1.0 / econ.equity_exponent)
    privacy_term = budget.sensitivity / budget.epsilon
    total = econ.alpha * contribution_term + econ.beta * privacy_term
    return contribution_term, privacy_term, total


def utility(tokens: float, cost: float) -> float:
    """Client utility for one round: tokens received minus cost incurred."""
    return tokens - cost


@dataclass
class LedgerRow:
    round_index: int
    client_id: int
    importance: float
    contribution_term: float
    privacy_term: float
    reward: float
    tokens: float
    cost: float
    utility: float


@dataclass
class RewardLedger:
    """Single-writer record of token flows and participation status.

    budget_scope "total" treats the token budget as one pool for the whole
    run; "per_round" refills it to the initial value every round. In both
    scopes the accounting identity issued + remaining = supply holds
    exactly at every round.
    """

    client_ids: list[int]
    token_budget: float
    budget_scope: str = "total"
    warmup_rounds: int = 0
    total_rounds: int = 0
    active: dict[int, bool] = field(init=False)
    issued_cumulative: float = field(init=False, default=0.0)
    issued_this_round: float = field(init=False, default=0.0)
    rows: list[LedgerRow] = field(init=False, default_factory=list)
    dropout_events: list[tuple[int, int]] = field(init=False, default_factory=list)
    last_tokens: dict[int, float] = field(init=False, default_factory=dict)
    last_utility: dict[int, float] = field(init=False, default_factory=dict)

    def __post_init__(self) -> None:
        if self.token_budget < 0.0:
            raise ValueError("token_budget must be >= 0")
        if self.budget_scope not in ("total", "per_round"):
            raise ValueError("budget_scope must be 'total' or 'per_round'")
        self.active = {cid: True for cid in self.client_ids}

    @property
    def active_ids(self) -> list[int]:
        return [cid for cid in self.client_ids if self.active[cid]]

    @property
    def num_active(self) -> int:
        return len(self.active_ids)

    @property
    def remaining(self) -> float:
        """Tokens still available in the current scope."""
        if self.budget_scope == "per_round":
            return self.token_budget - self.issued_this_round
        return self.token_budget - self.issued_cumulative

    def round_allotment(self) -> float:
        n = self.num_active
        return n * (n + 1) / 2.0

    def distribute_tokens(self, rewards: dict[int, float]) -> dict[int, float]:
        """Allocate this round's tokens proportionally to rewards.

        Shares follow reward_i / sum(rewards) times the round allotment
        N(N+1)/2 (N = currently active clients). If the allotment would
        overdraw the remaining budget, all shares are scaled down so the
        budget lands exactly on zero. While budget remains afterwards, one
        extra whole token goes to each active client in ascending id order.
        """
        active = self.active_ids
        if set(rewards) != set(active):
            raise ValueError("rewards must cover exactly the active clients")
        if self.budget_scope == "per_round":
            self.issued_this_round = 0.0

        allotment = self.round_allotment()
        total_reward = sum(rewards.values())
        if any(r < 0 for r in rewards.values()):
            raise ValueError("rewards must be nonnegative")
        if total_reward > 0.0:
            shares = {cid: rewards[cid] / total_reward for cid in active}
        else:
            log.warning("all rewards zero; splitting the round allotment equally")
            shares = {cid: 1.0 / len(active) for cid in active}

        budget_before = self.remaining
        if allotment > budget_before:
            scale = budget_before / allotment if allotment > 0 else 0.0
            tokens = {cid: shares[cid] * allotment * scale for cid in active}
        else:
            tokens = {cid: shares[cid] * allotment for cid in active}
        self._issue(sum(tokens.values()))

        # Round-robin bonus: one whole token per client while budget remains.
        for cid in active:
            if self.remaining >= 1.0:
                tokens[cid] += 1.0
                self._issue(1.0)
            else:
                break
        self.last_tokens = dict(tokens)
        return tokens

    def _issue(self, amount: float) -> None:
        self.issued_cumulative += amount
        self.issued_this_round += amount

    def record_round(
        self,
        round_index: int,
        importance: dict[int, float],
        contribution_terms: dict[int, float],
        privacy_terms: dict[int, float],
        rewards: dict[int, float],
        tokens: dict[int, float],
        costs: dict[int, float],
    ) -> dict[int, float]:
        """Append one row per active client; returns per-client utilities."""
        utilities = {}
        for cid in self.active_ids:
            u = utility(tokens[cid], costs[cid])
            utilities[cid] = u
            self.rows.append(
                LedgerRow(
                    round_index=round_index,
                    client_id=cid,
                    importance=importance[cid],
                    contribution_term=contribution_terms[cid],
                    privacy_term=privacy_terms[cid],
                    reward=rewards[cid],
                    tokens=tokens[cid],
                    cost=costs[cid],
                    utility=u,
                )
            )
        self.last_utility = utilities
        return utilities

    def apply_dropout(self, round_index: int) -> set[int]:
        """Permanently drop clients that lost money or were starved this round.

        A client leaves when its utility went strictly negative, or when it
        received zero tokens from an exhausted budget. Only call after the
        warm-up phase; during warm-up everyone stays by definition.
        """
        if round_index < self.warmup_rounds:
            raise ValueError("dropout is disabled during warm-up")
        dropped = set()
        starved_budget = self.remaining <= 0.0
        for cid in self.active_ids:
            u = self.last_utility.get(cid, 0.0)
            tokens = self.last_tokens.get(cid, 0.0)
            if u < 0.0 or (starved_budget and tokens == 0.0):
                self.active[cid] = False
                dropped.add(cid)
                self.dropout_events.append((round_index, cid))
        return dropped

    def total_tokens(self, cid: int) -> float:
        return float(sum(row.tokens for row in self.rows if row.client_id == cid))

    def mean_importance(self, cid: int) -> float:
        vals = [row.importance for row in self.rows if row.client_id == cid]
        return float(np.mean(vals)) if vals else float("nan")
