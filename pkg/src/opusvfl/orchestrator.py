"""The per-round protocol and full experiment loop.

Each round: clients forward their feature blocks, perturb the resulting
activations (opus mode), the server trains its heads on the concatenation
and returns per-client input-gradient slices, clients backpropagate and
update. After the warm-up phase the server additionally scores
leave-one-out contributions on a held-out twin batch, pays rewards and
tokens, lets each client adapt its privacy parameter by gradient ascent on
its reward, and applies dropout. Vanilla mode skips perturbation and the
whole incentive stage, reducing to plain split-network training.
"""

from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .adaptation import EpsilonTrace, grad_contribution, gs_h_from_losses, update_epsilon
from .config import ExperimentConfig
from .contribution import ContributionReport, HeadBank
from .data import (
    Batch,
    BatchStream,
    Dataset,
    VerticalPartition,
    load_mnist,
    partition,
    split_columns,
    synthetic_dataset,
    synthetic_image_dataset,
)
from .incentive import ClientEconomics, RewardLedger, reward
from .privacy import NoiseRecord, PrivacyBudget, noise_grad_epsilon, perturb, snr_db
from .rng import rng_stream
from .runlog import RunLogWriter, RunSummary
from .attacks import BackdoorSpec, band_trigger, poison_dataset

log = logging.getLogger(__name__)

STATUS_COMPLETED = "completed"
STATUS_TERMINATED = "terminated_insufficient_clients"


@dataclass
class ActivationBatch:
    """One client's forward output for one batch."""

    client_id: int
    values: np.ndarray  # (batch, embedding_dim)
    noisy: bool


class Client:
    """A participant: owns its feature columns, bottom model, and budget.

    The orchestrator only ever hands a client its own feature block and its
    own gradient slice; nothing from other clients passes through here.
    """

    def __init__(
        self,
        client_id: int,
        columns: tuple[int, ...],
        model: nn.Mlp,
        budget: PrivacyBudget,
        econ: ClientEconomics,
    ) -> None:
        self.client_id = client_id
        self.columns = columns
        self.model = model
        self.budget = budget
        self.econ = econ
        self.trace = EpsilonTrace()

    def forward(self, feature_block: np.ndarray) -> tuple[np.ndarray, nn.ForwardTape]:
        if feature_block.shape[1] != len(self.columns):
            raise ValueError(
                f"client {self.client_id} got {feature_block.shape[1]} columns, "
                f"owns {len(self.columns)}"
            )
        return nn.forward(self.model, feature_block)

    def backward_update(
        self, tape: nn.ForwardTape, grad_slice: np.ndarray, learning_rate: float
    ) -> None:
        param_grads, _ = nn.backward(self.model, tape, grad_slice)
        nn.sgd_step(self.model, param_grads, learning_rate)


@dataclass
class RoundState:
    """Everything one round produced, for logging and inspection."""

    round_index: int
    train_activations: dict[int, ActivationBatch]
    noise_records: dict[int, NoiseRecord] = field(default_factory=dict)
    eval_noise_records: dict[int, NoiseRecord] = field(default_factory=dict)
    loss_all: float = float("nan")
    grad_slices: dict[int, np.ndarray] = field(default_factory=dict)
    report: ContributionReport | None = None
    contribution_terms: dict[int, float] = field(default_factory=dict)
    privacy_terms: dict[int, float] = field(default_factory=dict)
    rewards: dict[int, float] = field(default_factory=dict)
    tokens: dict[int, float] = field(default_factory=dict)
    utilities: dict[int, float] = field(default_factory=dict)
    epsilon_gradients: dict[int, float] = field(default_factory=dict)
    epsilons: dict[int, float] = field(default_factory=dict)
    dropped: set[int] = field(default_factory=set)
    test_accuracy: float = float("nan")


def evaluate_accuracy(
    clients: list[Client],
    head_bank: HeadBank,
    feature_blocks: dict[int, np.ndarray],
    labels: np.ndarray,
) -> float:
    """Noiseless accuracy of the assembled split network on one batch."""
    if labels.size == 0:
        raise ValueError("empty evaluation split")
    activations = {}
    for client in clients:
        out, _ = client.forward(feature_blocks[client.client_id])
        activations[client.client_id] = out
    logits, _ = nn.forward(head_bank.global_head, head_bank.concat(activations))
    return float((logits.argmax(axis=1) == labels).mean())


def load_datasets(config: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Materialize (train, test) for the configured dataset."""
    if config.dataset == "mnist":
        train, test = load_mnist(config.mnist_dir)
    elif config.dataset == "synthetic_image":
        train, test = synthetic_image_dataset(
            config.image_train,
            config.image_test,
            seed=config.seed,
            label_noise=config.image_label_noise,
            pixel_noise=config.image_pixel_noise,
        )
    elif config.dataset == "synthetic":
        informative = (
            set(config.synth_informative)
            if config.synth_informative is not None
            else set(range(config.synth_features))
        )
        full = synthetic_dataset(
            config.synth_samples + config.synth_samples // 4,
            config.synth_features,
            config.synth_classes,
            informative,
            seed=config.seed,
        )
        split = config.synth_samples
        train = Dataset(full.features[:split], full.labels[:split], "synthetic-train")
        test = Dataset(full.features[split:], full.labels[split:], "synthetic-test")
    else:
        raise ValueError(f"unknown dataset {config.dataset!r}")
    if config.train_subsample:
        train = train.subsample(config.train_subsample, config.seed)
    return train, test


class Experiment:
    """One full run: state, protocol loop, logging."""

    def __init__(
        self,
        config: ExperimentConfig,
        out_dir: str | Path | None = None,
        gradient_tap=None,
    ) -> None:
        config.validate(strict=False, warn=False)
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.gradient_tap = gradient_tap

        self.train_data, self.test_data = load_datasets(config)
        self.partition = partition(
            self.train_data.num_features,
            config.n_clients,
            config.partition_scheme,
            [list(g) for g in config.explicit_columns] if config.explicit_columns else None,
        )
        self.attack_spec: BackdoorSpec | None = None
        if config.attack_enabled:
            self.attack_spec = self._build_attack_spec()
            self.train_data = poison_dataset(
                self.train_data,
                self.partition,
                self.attack_spec,
                rng_stream(config.seed, "poison"),
            )

        self.num_classes = max(self.train_data.num_classes, self.test_data.num_classes)
        self.stream = BatchStream(
            self.train_data, self.partition, config.batch_size, config.seed
        )
        self.clients = [
            self._make_client(cid, cols)
            for cid, cols in enumerate(self.partition.client_columns)
        ]
        self.head_bank = HeadBank(
            {c.client_id: config.embedding_dim for c in self.clients},
            self.num_classes,
            config.head_hidden,
            config.seed,
        )
        self.ledger = RewardLedger(
            [c.client_id for c in self.clients],
            token_budget=config.token_budget,
            budget_scope=config.budget_scope,
            warmup_rounds=config.warmup_rounds,
            total_rounds=config.total_rounds,
        )
        self.status = STATUS_COMPLETED
        self.rounds_completed = 0
        self._snr_sums: dict[int, float] = {c.client_id: 0.0 for c in self.clients}
        self._snr_counts: dict[int, int] = {c.client_id: 0 for c in self.clients}

        subset = min(config.eval_subset, self.test_data.num_samples)
        pick = rng_stream(config.seed, "test-subset").choice(
            self.test_data.num_samples, size=subset, replace=False
        )
        self._test_subset_blocks = split_columns(self.test_data.features[pick], self.partition)
        self._test_subset_labels = self.test_data.labels[pick]

    def _build_attack_spec(self) -> BackdoorSpec:
        config = self.config
        if config.trigger_columns is not None:
            cols = config.trigger_columns
        else:
            image_width = 28 if self.train_data.num_features == 784 else None
            cols = band_trigger(
                self.partition, config.attacker, config.trigger_width, image_width
            )
        return BackdoorSpec(
            attacker=config.attacker,
            poison_fraction=config.poison_fraction,
            target_class=config.target_class,
            trigger_columns=cols,
        )

    def _make_client(self, client_id: int, columns: tuple[int, ...]) -> Client:
        config = self.config
        model = nn.mlp_for_classifier(
            len(columns),
            (config.client_hidden,),
            config.embedding_dim,
            rng_stream(config.seed, "client-init", client=client_id),
        )
        budget = PrivacyBudget(
            epsilon=config.epsilon_init,
            delta=config.delta,
            sensitivity=config.sensitivity,
            step_size=config.epsilon_step,
            eps_lower=min(config.epsilon_lower, config.epsilon_init),
            eps_upper=max(config.epsilon_upper, config.epsilon_init),
        )
        fractions = config.per_client(config.resource_fraction)
        costs = config.per_client(config.cost_per_round)
        econ = ClientEconomics(
            resource_fraction=fractions[client_id],
            cost_per_round=costs[client_id],
            equity_exponent=config.equity_exponent,
            alpha=config.alpha,
            beta=config.beta,
        )
        return Client(client_id, columns, model, budget, econ)

    # ------------------------------------------------------------------
    # Round protocol
    # ------------------------------------------------------------------

    @property
    def active_clients(self) -> list[Client]:
        active = set(self.ledger.active_ids)
        return [c for c in self.clients if c.client_id in active]

    def _forward_all(
        self, batch: Batch, round_index: int, noise_namespace: str | None
    ) -> tuple[dict[int, ActivationBatch], dict[int, nn.ForwardTape], dict[int, NoiseRecord]]:
        """Forward every active client; optionally perturb (opus mode)."""
        activations: dict[int, ActivationBatch] = {}
        tapes: dict[int, nn.ForwardTape] = {}
        records: dict[int, NoiseRecord] = {}
        for client in self.active_clients:
            cid = client.client_id
            clean, tape = client.forward(batch.per_client_features[cid])
            tapes[cid] = tape
            if noise_namespace is None:
                activations[cid] = ActivationBatch(cid, clean, noisy=False)
            else:
                noisy, record = perturb(
                    clean,
                    client.budget,
                    rng_stream(self.config.seed, noise_namespace, cid, round_index),
                )
                activations[cid] = ActivationBatch(cid, noisy, noisy=True)
                records[cid] = record
                if noise_namespace == "noise":
                    self._snr_sums[cid] += snr_db(clean, noisy - clean)
                    self._snr_counts[cid] += 1
        return activations, tapes, records

    def run_round(self, round_index: int) -> RoundState:
        if self.status != STATUS_COMPLETED or self.ledger.num_active < 2:
            raise RuntimeError("run terminated: fewer than 2 active clients")
        config = self.config
        opus = config.mode == "opus"
        incentive_round = opus and round_index >= config.warmup_rounds

        batch = self.stream.next_batch()
        activations, tapes, records = self._forward_all(
            batch, round_index, "noise" if opus else None
        )
        state = RoundState(round_index, activations, noise_records=records)

        values = {cid: act.values for cid, act in activations.items()}
        state.loss_all, state.grad_slices = self.head_bank.train_heads(
            values, batch.labels, config.server_lr, train_loo=opus
        )
        for client in self.active_clients:
            cid = client.client_id
            if self.gradient_tap is not None and cid == getattr(
                self.gradient_tap, "client_id", None
            ):
                self.gradient_tap.record(
                    round_index, batch.sample_indices, state.grad_slices[cid]
                )
            client.backward_update(tapes[cid], state.grad_slices[cid], config.client_lr)

        if incentive_round:
            self._incentive_stage(round_index, batch, state)

        bank_clients = self._bank_clients()
        state.test_accuracy = evaluate_accuracy(
            bank_clients,
            self.head_bank,
            {c.client_id: self._test_subset_blocks[c.client_id] for c in bank_clients},
            self._test_subset_labels,
        )
        return state

    def _bank_clients(self) -> list[Client]:
        """Clients the current head bank covers (the last functioning federation)."""
        ids = set(self.head_bank.client_ids)
        return [c for c in self.clients if c.client_id in ids]

    def _incentive_stage(self, round_index: int, batch: Batch, state: RoundState) -> None:
        """Contribution scoring, rewards, tokens, epsilon adaptation, dropout."""
        config = self.config
        eval_batch = self.stream.disjoint_batch(
            batch.sample_indices, config.batch_size, round_index
        )
        eval_acts, _, eval_records = self._forward_all(eval_batch, round_index, "noise-eval")
        state.eval_noise_records = eval_records
        eval_values = {cid: act.values for cid, act in eval_acts.items()}

        loss_eval, eval_grad_slices = self.head_bank.global_grad_input(
            eval_values, eval_batch.labels
        )
        if loss_eval <= 0.0:
            raise ValueError("degenerate evaluation loss <= 0")
        loo_losses = {
            cid: self.head_bank.loo_loss(cid, eval_values, eval_batch.labels)
            for cid in eval_values
        }
        importance = {
            cid: (loo_losses[cid] - loss_eval) * 100.0 / loss_eval for cid in eval_values
        }
        state.report = ContributionReport(round_index, loss_eval, loo_losses, importance)

        for client in self.active_clients:
            cid = client.client_id
            s, p, r = reward(importance[cid], client.econ, client.budget)
            state.contribution_terms[cid] = s
            state.privacy_terms[cid] = p
            state.rewards[cid] = r
        state.tokens = self.ledger.distribute_tokens(state.rewards)
        costs = {c.client_id: c.econ.cost_per_round for c in self.active_clients}
        state.utilities = self.ledger.record_round(
            round_index, importance, state.contribution_terms, state.privacy_terms,
            state.rewards, state.tokens, costs,
        )

        for client in self.active_clients:
            cid = client.client_id
            gs = gs_h_from_losses(
                loss_eval, loo_losses[cid], eval_grad_slices[cid], client.econ
            )
            dh = noise_grad_epsilon(eval_records[cid], client.budget)
            gradient = grad_contribution(gs, dh, client.econ, client.budget)
            state.epsilon_gradients[cid] = gradient
            state.epsilons[cid] = update_epsilon(
                client.budget, gradient, client.trace, round_index
            )

        state.dropped = self.ledger.apply_dropout(round_index)
        if state.dropped:
            log.info("round %d: clients %s dropped", round_index, sorted(state.dropped))
            if self.ledger.num_active >= 2:
                self.head_bank = self.head_bank.rebuild(self.ledger.active_ids, round_index)
            else:
                self.status = STATUS_TERMINATED

    # ------------------------------------------------------------------
    # Full run
    # ------------------------------------------------------------------

    def run(self) -> RunSummary:
        config = self.config
        writer = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            writer = RunLogWriter(self.out_dir / "runlog.csv")
        started = time.perf_counter()
        try:
            for round_index in range(config.total_rounds):
                state = self.run_round(round_index)
                self.rounds_completed = round_index + 1
                if writer is not None:
                    self._write_rows(writer, state)
                if self.status == STATUS_TERMINATED:
                    log.warning(
                        "terminating at round %d: fewer than 2 active clients", round_index
                    )
                    break
        finally:
            if writer is not None:
                writer.close()
        elapsed = time.perf_counter() - started

        summary = self._summarize(elapsed)
        if self.out_dir is not None:
            summary.log_path = str(self.out_dir / "runlog.csv")
            summary.write(self.out_dir / "summary.json")
        return summary

    def _write_rows(self, writer: RunLogWriter, state: RoundState) -> None:
        writer.server_row(state.round_index, state.loss_all, state.test_accuracy)
        if state.report is None:
            return
        for cid in sorted(state.rewards):
            cost = state.tokens[cid] - state.utilities[cid]
            writer.client_row(
                state.round_index,
                cid,
                importance=state.report.importance[cid],
                contribution_term=state.contribution_terms[cid],
                privacy_term=state.privacy_terms[cid],
                reward=state.rewards[cid],
                tokens=state.tokens[cid],
                cost=cost,
                utility=state.utilities[cid],
                epsilon=state.epsilons[cid],
                epsilon_gradient=state.epsilon_gradients[cid],
                active=cid not in state.dropped,
            )

    def _summarize(self, elapsed: float) -> RunSummary:
        config = self.config
        final_test = self._full_accuracy(self.test_data)
        final_train = self._full_accuracy(
            self.train_data.subsample(min(10000, self.train_data.num_samples), config.seed)
        )
        per_client = {}
        for client in self.clients:
            cid = client.client_id
            count = self._snr_counts[cid]
            per_client[cid] = {
                "total_tokens": self.ledger.total_tokens(cid),
                "mean_importance": self.ledger.mean_importance(cid),
                "final_epsilon": client.budget.epsilon,
                "mean_snr_db": self._snr_sums[cid] / count if count else float("nan"),
                "active": float(self.ledger.active[cid]),
            }
        return RunSummary(
            config=dataclasses.asdict(config),
            status=self.status,
            rounds_completed=self.rounds_completed,
            rounds_per_epoch=-(-self.train_data.num_samples // config.batch_size),
            final_train_accuracy=final_train,
            final_test_accuracy=final_test,
            per_client=per_client,
            dropout_events=list(self.ledger.dropout_events),
            mean_round_seconds=elapsed / max(self.rounds_completed, 1),
        )

    def _full_accuracy(self, dataset: Dataset) -> float:
        blocks = split_columns(dataset.features, self.partition)
        bank_clients = self._bank_clients()
        return evaluate_accuracy(
            bank_clients,
            self.head_bank,
            {c.client_id: blocks[c.client_id] for c in bank_clients},
            dataset.labels,
        )


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | Path | None = None,
    gradient_tap=None,
) -> RunSummary:
    """Execute a full experiment from a validated config."""
    return Experiment(config, out_dir=out_dir, gradient_tap=gradient_tap).run()
