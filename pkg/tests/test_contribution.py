import math

import numpy as np
import pytest

from opusvfl import nn
from opusvfl.contribution import HeadBank
from opusvfl.rng import rng_stream

from oracles import scalar_cross_entropy


def make_bank(dims={0: 4, 1: 3, 2: 5}, num_classes=10, hidden=(), seed=0):
    return HeadBank(dict(dims), num_classes, hidden, seed)


def random_activations(bank, batch=8, seed=1):
    stream = rng_stream(seed, "acts")
    return {cid: stream.standard_normal((batch, dim)) for cid, dim in bank.embedding_dims.items()}


def labels_for(batch=8, num_classes=10, seed=2):
    return rng_stream(seed, "labels").integers(0, num_classes, size=batch)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def test_untrained_head_loss_near_log_num_classes():
    # symmetric init and modest activation scale give near-uniform predictions
    bank = make_bank(num_classes=10)
    acts = {cid: 0.3 * a for cid, a in random_activations(bank, batch=64).items()}
    loss = bank.global_loss(acts, labels_for(64))
    assert abs(loss - math.log(10)) < 0.2


def test_global_loss_matches_scalar_oracle():
    bank = make_bank(num_classes=4)
    acts = random_activations(bank)
    labels = labels_for(num_classes=4)
    concat = bank.concat(acts)
    logits, _ = nn.forward(bank.global_head, concat)
    assert bank.global_loss(acts, labels) == pytest.approx(
        scalar_cross_entropy(logits, labels), rel=1e-12
    )


def test_permuting_columns_with_matching_weight_rows_keeps_loss():
    bank = make_bank()
    acts = random_activations(bank)
    labels = labels_for()
    baseline = bank.global_loss(acts, labels)

    perm = rng_stream(3, "perm").permutation(bank.global_head.in_dim)
    permuted_concat = bank.concat(acts)[:, perm]
    permuted_head = nn.Mlp(
        [nn.DenseLayer(bank.global_head.layers[0].weights[perm, :],
                       bank.global_head.layers[0].bias.copy(), "identity")]
    )
    logits, _ = nn.forward(permuted_head, permuted_concat)
    loss, _ = nn.softmax_cross_entropy(logits, labels)
    assert loss == pytest.approx(baseline, rel=1e-12)


def test_loo_loss_ignores_the_excluded_client():
    bank = make_bank(dims={0: 4, 1: 3}, num_classes=3)
    acts = random_activations(bank)
    labels = labels_for(num_classes=3)
    baseline = bank.loo_loss(0, acts, labels)
    acts[0] = acts[0] + 100.0  # client 0's activations must not matter
    assert bank.loo_loss(0, acts, labels) == pytest.approx(baseline)


def test_loo_loss_for_inactive_client_raises():
    bank = make_bank(dims={0: 4, 1: 3})
    with pytest.raises(ValueError, match="not active"):
        bank.loo_loss(7, random_activations(bank), labels_for())


def test_synchronized_twins_have_equal_loo_losses():
    # duplicated-feature twins: identical activations and synchronized heads
    bank = make_bank(dims={0: 4, 1: 4, 2: 3}, num_classes=5)
    twin_weights = bank.loo_heads[0].layers[0]
    bank.loo_heads[1].layers[0].weights[:] = twin_weights.weights
    bank.loo_heads[1].layers[0].bias[:] = twin_weights.bias
    stream = rng_stream(4, "twin")
    shared = stream.standard_normal((8, 4))
    acts = {0: shared, 1: shared.copy(), 2: stream.standard_normal((8, 3))}
    labels = labels_for(num_classes=5)
    # excluding twin 0 leaves {twin 1, client 2}; excluding twin 1 leaves
    # {twin 0, client 2}: identical inputs through synchronized heads
    assert bank.loo_loss(0, acts, labels) == pytest.approx(bank.loo_loss(1, acts, labels))


def test_mismatched_active_set_raises():
    bank = make_bank(dims={0: 4, 1: 3})
    acts = {0: np.zeros((2, 4))}
    with pytest.raises(ValueError, match="do not match"):
        bank.global_loss(acts, np.zeros(2, dtype=int))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def test_train_heads_updates_global_head():
    bank = make_bank()
    before = bank.global_head.layers[0].weights.copy()
    bank.train_heads(random_activations(bank), labels_for(), 0.1)
    assert not np.array_equal(before, bank.global_head.layers[0].weights)


def test_zero_learning_rate_freezes_all_heads():
    bank = make_bank()
    snapshot = [head.layers[0].weights.copy() for head in bank.loo_heads.values()]
    snapshot.append(bank.global_head.layers[0].weights.copy())
    bank.train_heads(random_activations(bank), labels_for(), 0.0)
    for head, copy in zip(list(bank.loo_heads.values()) + [bank.global_head], snapshot):
        assert np.array_equal(head.layers[0].weights, copy)


def test_grad_slices_come_only_from_the_global_head():
    # wrecking the LOO heads must not change what the clients receive
    bank_a = make_bank(seed=5)
    bank_b = make_bank(seed=5)
    for head in bank_b.loo_heads.values():
        head.layers[0].weights[:] = 1e3
    acts = random_activations(bank_a)
    labels = labels_for()
    _, slices_a = bank_a.train_heads(acts, labels, 0.1)
    _, slices_b = bank_b.train_heads(acts, labels, 0.1)
    for cid in slices_a:
        assert np.array_equal(slices_a[cid], slices_b[cid])
        assert slices_a[cid].shape == acts[cid].shape


# ---------------------------------------------------------------------------
# importance
# ---------------------------------------------------------------------------


class StubbedBank(HeadBank):
    """Bank with forced losses, to pin the importance formula."""

    def __init__(self, loss_all, loo_losses):
        super().__init__({0: 2, 1: 2}, 3, (), 0)
        self._loss_all = loss_all
        self._loo = loo_losses

    def global_loss(self, activations, labels):
        return self._loss_all

    def loo_loss(self, i, activations, labels):
        return self._loo[i]


def test_importance_zero_when_losses_equal():
    bank = StubbedBank(0.7, {0: 0.7, 1: 0.7})
    report = bank.compute_importance({0: np.zeros((1, 2)), 1: np.zeros((1, 2))}, np.zeros(1, int), 0)
    assert report.importance == {0: pytest.approx(0.0), 1: pytest.approx(0.0)}


def test_importance_hundred_when_loss_doubles():
    bank = StubbedBank(0.5, {0: 1.0, 1: 0.25})
    report = bank.compute_importance({0: np.zeros((1, 2)), 1: np.zeros((1, 2))}, np.zeros(1, int), 0)
    assert report.importance[0] == pytest.approx(100.0)
    assert report.importance[1] == pytest.approx(-50.0)  # negative importance is preserved


def test_degenerate_loss_rejected():
    bank = StubbedBank(0.0, {0: 1.0, 1: 1.0})
    with pytest.raises(ValueError, match="degenerate"):
        bank.compute_importance({0: np.zeros((1, 2)), 1: np.zeros((1, 2))}, np.zeros(1, int), 0)


def test_importance_formula_identity_on_real_losses():
    bank = make_bank(num_classes=4)
    acts = random_activations(bank, batch=16)
    labels = labels_for(16, num_classes=4)
    report = bank.compute_importance(acts, labels, round_index=3)
    for cid in bank.embedding_dims:
        expected = (report.loo_losses[cid] - report.loss_all) * 100.0 / report.loss_all
        assert report.importance[cid] == pytest.approx(expected, rel=1e-12)
        assert math.isfinite(report.importance[cid])


# ---------------------------------------------------------------------------
# rebuild on dropout
# ---------------------------------------------------------------------------


def test_rebuild_shrinks_to_survivors():
    bank = make_bank(dims={0: 4, 1: 3, 2: 5})
    rebuilt = bank.rebuild([0, 2], round_index=9)
    assert rebuilt.client_ids == [0, 2]
    assert rebuilt.global_head.in_dim == 9
    assert rebuilt.loo_heads[0].in_dim == 5
    assert rebuilt.loo_heads[2].in_dim == 4
    acts = {0: np.zeros((2, 4)), 1: np.zeros((2, 3)), 2: np.zeros((2, 5))}
    with pytest.raises(ValueError):
        rebuilt.global_loss(acts, np.zeros(2, int))
