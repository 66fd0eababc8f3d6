"""Leave-one-out contribution scoring.

The server keeps one global head over the concatenation of all client
activations plus, for each client i, a leave-one-out head over the
concatenation that excludes i. Comparing the two losses gives the
percentage importance of each client's activations. Only the global
head's input gradient ever flows back to clients; the LOO heads are
bookkeeping models that never influence client training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .rng import rng_stream


@dataclass
class ContributionReport:
    """Per-round leave-one-out importance of every active client."""

    round_index: int
    loss_all: float
    loo_losses: dict[int, float]
    importance: dict[int, float]  # percent loss increase when the client is removed


class HeadBank:
    """The global head plus one leave-one-out head per active client."""

    def __init__(
        self,
        embedding_dims: dict[int, int],
        num_classes: int,
        head_hidden: tuple[int, ...],
        master_seed: int,
        init_round: int = -1,
    ) -> None:
        if len(embedding_dims) < 2:
            raise ValueError("need at least 2 clients")
        self.embedding_dims = dict(sorted(embedding_dims.items()))
        self.num_classes = num_classes
        self.head_hidden = head_hidden
        self.master_seed = master_seed
        total = sum(self.embedding_dims.values())
        self.global_head = nn.mlp_for_classifier(
            total, head_hidden, num_classes,
            rng_stream(master_seed, "head-init", client=-1, round_index=init_round),
        )
        self.loo_heads = {
            cid: nn.mlp_for_classifier(
                total - dim, head_hidden, num_classes,
                rng_stream(master_seed, "head-init", client=cid, round_index=init_round),
            )
            for cid, dim in self.embedding_dims.items()
        }

    @property
    def client_ids(self) -> list[int]:
        return list(self.embedding_dims)

    def _column_slices(self) -> dict[int, slice]:
        slices, start = {}, 0
        for cid, dim in self.embedding_dims.items():
            slices[cid] = slice(start, start + dim)
            start += dim
        return slices

    def concat(self, activations: dict[int, np.ndarray]) -> np.ndarray:
        """Column-wise concatenation in ascending client-id order."""
        if set(activations) != set(self.embedding_dims):
            raise ValueError(
                f"activations for clients {sorted(activations)} do not match "
                f"active set {self.client_ids}"
            )
        return np.hstack([activations[cid] for cid in self.embedding_dims])

    def concat_excluding(self, i: int, activations: dict[int, np.ndarray]) -> np.ndarray:
        return np.hstack(
            [activations[cid] for cid in self.embedding_dims if cid != i]
        )

    def global_loss(self, activations: dict[int, np.ndarray], labels: np.ndarray) -> float:
        """Cross-entropy of the global head over all clients' activations."""
        logits, _ = nn.forward(self.global_head, self.concat(activations))
        loss, _ = nn.softmax_cross_entropy(logits, labels)
        return loss

    def loo_loss(self, i: int, activations: dict[int, np.ndarray], labels: np.ndarray) -> float:
        """Cross-entropy of LOO head i, which never sees client i's columns."""
        if i not in self.loo_heads:
            raise ValueError(f"client {i} is not active")
        logits, _ = nn.forward(self.loo_heads[i], self.concat_excluding(i, activations))
        loss, _ = nn.softmax_cross_entropy(logits, labels)
        return loss

    def global_grad_input(
        self, activations: dict[int, np.ndarray], labels: np.ndarray
    ) -> tuple[float, dict[int, np.ndarray]]:
        """Global-head loss and its gradient split into per-client slices.

        Does not update any parameters; this is the read-only backward used
        for scoring and for the epsilon adaptation.
        """
        logits, tape = nn.forward(self.global_head, self.concat(activations))
        loss, grad_logits = nn.softmax_cross_entropy(logits, labels)
        _, grad_input = nn.backward(self.global_head, tape, grad_logits)
        slices = self._column_slices()
        return loss, {cid: grad_input[:, slices[cid]] for cid in self.embedding_dims}

    def train_heads(
        self,
        activations: dict[int, np.ndarray],
        labels: np.ndarray,
        learning_rate: float,
        train_loo: bool = True,
    ) -> tuple[float, dict[int, np.ndarray]]:
        """One SGD step for the global head (and each LOO head) on this batch.

        Returns:
            (loss_all, grad_slices): the pre-step global loss and the
            per-client input-gradient slices the server sends back. LOO
            heads only update themselves; nothing they compute reaches
            the clients.
        """
        logits, tape = nn.forward(self.global_head, self.concat(activations))
        loss, grad_logits = nn.softmax_cross_entropy(logits, labels)
        param_grads, grad_input = nn.backward(self.global_head, tape, grad_logits)
        nn.sgd_step(self.global_head, param_grads, learning_rate)
        slices = self._column_slices()
        grad_slices = {cid: grad_input[:, slices[cid]] for cid in self.embedding_dims}

        if train_loo:
            for cid, head in self.loo_heads.items():
                loo_logits, loo_tape = nn.forward(head, self.concat_excluding(cid, activations))
                _, loo_grad = nn.softmax_cross_entropy(loo_logits, labels)
                loo_param_grads, _ = nn.backward(head, loo_tape, loo_grad)
                nn.sgd_step(head, loo_param_grads, learning_rate)
        return loss, grad_slices

    def compute_importance(
        self,
        activations: dict[int, np.ndarray],
        labels: np.ndarray,
        round_index: int,
    ) -> ContributionReport:
        """Leave-one-out importance I_i = (loss_without_i - loss_all) * 100 / loss_all.

        Negative values are reported as-is; any flooring for reward
        purposes happens in the incentive layer.
        """
        loss_all = self.global_loss(activations, labels)
        if loss_all <= 0.0:
            raise ValueError("degenerate global loss <= 0; importance undefined")
        loo = {cid: self.loo_loss(cid, activations, labels) for cid in self.embedding_dims}
        importance = {
            cid: (loo[cid] - loss_all) * 100.0 / loss_all for cid in self.embedding_dims
        }
        return ContributionReport(round_index, loss_all, loo, importance)

    def rebuild(self, active_ids: list[int], round_index: int) -> "HeadBank":
        """Fresh bank after dropout: only the surviving clients, new seeded init."""
        dims = {cid: self.embedding_dims[cid] for cid in active_ids}
        return HeadBank(dims, self.num_classes, self.head_hidden, self.master_seed, round_index)
