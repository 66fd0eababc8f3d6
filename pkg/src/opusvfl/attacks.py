"""Robustness harness: backdoor poisoning and inference-attack proxies.

Attacks only touch data and observers; the round protocol runs unchanged.
The label-inference and feature-inference evaluations are simplified
proxies (gradient clustering and a learned activation decoder) and every
report labels them as such.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import nn
from .data import Dataset, VerticalPartition, split_columns
from .rng import rng_stream


@dataclass(frozen=True)
class BackdoorSpec:
    """Trigger-based poisoning by one malicious client."""

    attacker: int
    poison_fraction: float  # pd, fraction of training rows poisoned
    target_class: int
    trigger_columns: tuple[int, ...]
    trigger_value: float = 1.0

    def __post_init__(self) -> None:
        if not 0.0 <= self.poison_fraction <= 1.0:
            raise ValueError("poison_fraction must be in [0, 1]")
        if not self.trigger_columns:
            raise ValueError("trigger needs at least one column")


def band_trigger(
    part: VerticalPartition,
    attacker: int,
    width: int = 3,
    image_width: int | None = None,
) -> tuple[int, ...]:
    """Default trigger: a `width`-column all-ones band inside the attacker's slice.

    For image data (image_width given) the band is the set of the
    attacker's columns lying in the first `width` image columns; otherwise
    it is simply the first `width` feature columns the attacker owns.
    """
    cols = sorted(part.client_columns[attacker])
    if image_width is not None:
        band = tuple(c for c in cols if c % image_width < width)
        if band:
            return band
    return tuple(cols[:width])


def poison_dataset(
    dataset: Dataset,
    part: VerticalPartition,
    spec: BackdoorSpec,
    rng: np.random.Generator,
) -> Dataset:
    """Write the trigger into a pd-fraction of rows and flip their labels.

    Rows are chosen uniformly without replacement from the seeded stream;
    all other rows are untouched. Raises if the trigger falls outside the
    attacker's feature columns.
    """
    attacker_cols = set(part.client_columns[spec.attacker])
    outside = set(spec.trigger_columns) - attacker_cols
    if outside:
        raise ValueError(f"trigger columns {sorted(outside)} outside the attacker's partition")
    count = int(round(spec.poison_fraction * dataset.num_samples))
    features = dataset.features.copy()
    labels = dataset.labels.copy()
    if count > 0:
        rows = rng.choice(dataset.num_samples, size=count, replace=False)
        features[np.ix_(rows, list(spec.trigger_columns))] = spec.trigger_value
        labels[rows] = spec.target_class
    return Dataset(features, labels, f"{dataset.name}+backdoor(pd={spec.poison_fraction:g})")


def apply_trigger(features: np.ndarray, spec: BackdoorSpec) -> np.ndarray:
    stamped = features.copy()
    stamped[:, list(spec.trigger_columns)] = spec.trigger_value
    return stamped


def eval_asr(
    clients: list,
    head_bank,
    test_data: Dataset,
    part: VerticalPartition,
    spec: BackdoorSpec,
) -> float:
    """Attack success rate: triggered non-target test rows classified as the target.

    Samples already labeled with the target class are excluded, so a
    perfect clean model scores 0 and a random one about 1/num_classes.
    """
    eligible = test_data.labels != spec.target_class
    if not eligible.any():
        raise ValueError("no eligible test samples outside the target class")
    stamped = apply_trigger(test_data.features[eligible], spec)
    blocks = split_columns(stamped, part)
    activations = {}
    for client in clients:
        out, _ = client.forward(blocks[client.client_id])
        activations[client.client_id] = out
    logits, _ = nn.forward(head_bank.global_head, head_bank.concat(activations))
    return float((logits.argmax(axis=1) == spec.target_class).mean())


# ---------------------------------------------------------------------------
# Label-inference proxy: cluster the gradients the attacker receives
# ---------------------------------------------------------------------------


class GradientTap:
    """Observer recording the per-sample gradient slices one client receives.

    Keeps the first gradient seen per sample (early-training gradients carry
    the strongest label signal) and stops once max_samples are collected.
    """

    def __init__(self, client_id: int, start_round: int = 0, max_samples: int = 2000) -> None:
        self.client_id = client_id
        self.start_round = start_round
        self.max_samples = max_samples
        self.grad_by_sample: dict[int, np.ndarray] = {}

    def record(self, round_index: int, sample_indices: np.ndarray, grad_slice: np.ndarray) -> None:
        if round_index < self.start_round or len(self.grad_by_sample) >= self.max_samples:
            return
        for idx, grad in zip(sample_indices, grad_slice):
            self.grad_by_sample.setdefault(int(idx), grad.copy())

    def collected(self) -> tuple[np.ndarray, np.ndarray]:
        ids = np.array(sorted(self.grad_by_sample), dtype=np.int64)
        grads = np.stack([self.grad_by_sample[i] for i in ids]) if ids.size else np.empty((0, 0))
        return ids, grads


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 100) -> np.ndarray:
    """Plain k-means with k-means++ seeding; returns cluster assignments."""
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = ((points[:, None, :] - np.asarray(centers)[None]) ** 2).sum(-1).min(axis=1)
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(points[rng.choice(n, p=probs)])
    centers = np.asarray(centers)
    assign = np.zeros(n, dtype=np.int64)
    for _ in range(iters):
        assign = ((points[:, None, :] - centers[None]) ** 2).sum(-1).argmin(axis=1)
        new_centers = centers.copy()
        for j in range(k):
            members = points[assign == j]
            if members.size:
                new_centers[j] = members.mean(axis=0)
        if np.allclose(new_centers, centers):
            break
        centers = new_centers
    return assign


def label_inference_proxy(
    gradients: np.ndarray,
    labels: np.ndarray,
    num_classes: int,
    seed: int,
) -> float:
    """Cluster received gradient vectors and match clusters to labels.

    Accuracy is the best one-to-one cluster/label assignment (Hungarian
    matching on the confusion counts). Requires at least 50 gradient
    samples per class.

    This is a proxy for gradient-based label leakage, not a reimplementation
    of any published attack.
    """
    gradients = np.asarray(gradients, dtype=np.float64)
    labels = np.asarray(labels)
    if gradients.shape[0] != labels.shape[0]:
        raise ValueError("one label per gradient sample required")
    if gradients.shape[0] < 50 * num_classes:
        raise ValueError(f"need at least {50 * num_classes} gradient samples")
    norms = np.linalg.norm(gradients, axis=1)
    if not norms.any():
        raise ValueError("degenerate all-zero gradients")
    normalized = gradients / np.maximum(norms[:, None], 1e-12)
    assign = _kmeans(normalized, num_classes, rng_stream(seed, "proxy-kmeans"))
    counts = np.zeros((num_classes, num_classes))
    for cluster, label in zip(assign, labels):
        counts[cluster, label] += 1
    cluster_ids, label_ids = linear_sum_assignment(-counts)
    matched = counts[cluster_ids, label_ids].sum()
    return float(matched / len(labels))


# ---------------------------------------------------------------------------
# Feature-inference proxy: decode features from (noisy) activations
# ---------------------------------------------------------------------------


def _mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def feature_inference_proxy(
    activations: np.ndarray,
    features: np.ndarray,
    seed: int,
    hidden: tuple[int, ...] = (64,),
    steps: int = 400,
    batch_size: int = 128,
    learning_rate: float = 0.1,
) -> tuple[float, float]:
    """Train a decoder from activations to raw features; report held-out MSE.

    The auxiliary set (>= 500 pairs, simulating worst-case leakage) is
    split 80/20; the decoder trains on the first part and the returned MSE
    (mean over samples and feature entries) is evaluated on the rest.

    Returns:
        (decoder_mse, baseline_mse) where the baseline is the constant
        mean predictor, i.e. the held-out feature variance.
    """
    activations = np.asarray(activations, dtype=np.float64)
    features = np.asarray(features, dtype=np.float64)
    if activations.shape[0] != features.shape[0]:
        raise ValueError("activations and features must be row-aligned")
    n = activations.shape[0]
    if n < 500:
        raise ValueError("need an auxiliary set of at least 500 samples")
    rng = rng_stream(seed, "proxy-decoder")
    order = rng.permutation(n)
    cut = int(0.8 * n)
    train_idx, test_idx = order[:cut], order[cut:]

    decoder = nn.mlp_for_classifier(
        activations.shape[1], hidden, features.shape[1], rng_stream(seed, "decoder-init")
    )
    for _ in range(steps):
        pick = rng.choice(train_idx, size=min(batch_size, cut), replace=False)
        out, tape = nn.forward(decoder, activations[pick])
        _, grad = _mse_loss(out, features[pick])
        param_grads, _ = nn.backward(decoder, tape, grad)
        nn.sgd_step(decoder, param_grads, learning_rate)

    prediction, _ = nn.forward(decoder, activations[test_idx])
    decoder_mse = float(np.mean((prediction - features[test_idx]) ** 2))
    train_mean = features[train_idx].mean(axis=0)
    baseline_mse = float(np.mean((features[test_idx] - train_mean) ** 2))
    return decoder_mse, baseline_mse


def collect_victim_pairs(
    experiment,
    victim: int,
    n: int,
    seed: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Auxiliary (activation, feature) pairs for the victim after training.

    Forwards n seeded training rows through the victim's trained model and
    perturbs the activations exactly as the victim would transmit them
    (no noise in vanilla mode), pairing them with the raw feature block the
    attacker is trying to reconstruct.
    """
    from .privacy import perturb  # local import to keep module deps flat

    train = experiment.train_data
    rows = rng_stream(seed, "aux-sample").choice(train.num_samples, size=n, replace=False)
    blocks = split_columns(train.features[rows], experiment.partition)
    client = next(c for c in experiment.clients if c.client_id == victim)
    clean, _ = client.forward(blocks[victim])
    if experiment.config.mode == "opus":
        noisy, _ = perturb(clean, client.budget, rng_stream(seed, "aux-noise", victim))
        return noisy, blocks[victim]
    return clean, blocks[victim]


# ---------------------------------------------------------------------------
# Matched-pair evaluations (the `attack` CLI subcommand and acceptance tests)
# ---------------------------------------------------------------------------


def run_backdoor_evaluation(
    base_config,
    poison_fraction: float,
    seed: int,
    out_dir=None,
) -> dict[str, "AttackReport"]:
    """Train matched opus/vanilla runs under one backdoor spec; report ASR."""
    import dataclasses

    from .orchestrator import Experiment  # deferred; orchestrator imports this module
    from .runlog import AttackReport

    reports = {}
    for mode in ("opus", "vanilla"):
        config = dataclasses.replace(
            base_config,
            mode=mode,
            seed=seed,
            attack_enabled=True,
            poison_fraction=poison_fraction,
        )
        run_out = None if out_dir is None else f"{out_dir}/{mode}_pd{poison_fraction:g}_s{seed}"
        experiment = Experiment(config, out_dir=run_out)
        summary = experiment.run()
        asr = eval_asr(
            experiment.active_clients,
            experiment.head_bank,
            experiment.test_data,
            experiment.partition,
            experiment.attack_spec,
        )
        reports[mode] = AttackReport(
            mode=mode,
            poison_fraction=poison_fraction,
            attack_success_rate=asr,
            clean_accuracy=summary.final_test_accuracy,
        )
    return reports


def run_inference_evaluation(
    base_config,
    seed: int,
    aux_size: int = 1000,
    out_dir=None,
) -> dict[str, "AttackReport"]:
    """Matched clean runs measuring both inference proxies per mode."""
    import dataclasses

    from .orchestrator import Experiment
    from .runlog import AttackReport

    reports = {}
    for mode in ("opus", "vanilla"):
        config = dataclasses.replace(
            base_config, mode=mode, seed=seed, attack_enabled=False, poison_fraction=0.0
        )
        tap = GradientTap(config.attacker)
        run_out = None if out_dir is None else f"{out_dir}/{mode}_inference_s{seed}"
        experiment = Experiment(config, out_dir=run_out, gradient_tap=tap)
        summary = experiment.run()

        ids, grads = tap.collected()
        label_acc = label_inference_proxy(
            grads, experiment.train_data.labels[ids], experiment.num_classes, seed
        )
        victim = (config.attacker + 1) % config.n_clients
        acts, feats = collect_victim_pairs(experiment, victim, aux_size, seed)
        mse, _ = feature_inference_proxy(acts, feats, seed)
        reports[mode] = AttackReport(
            mode=mode,
            poison_fraction=0.0,
            attack_success_rate=float("nan"),
            clean_accuracy=summary.final_test_accuracy,
            label_inference_accuracy=label_acc,
            feature_inference_mse=mse,
        )
    return reports
