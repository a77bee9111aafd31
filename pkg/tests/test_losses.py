"""Loss-branch oracles: hand-computed values, stability at extreme logits,
analytic gradients against finite differences, and the shift-sensitivity
negative test for the realness head."""

import numpy as np
import pytest

from bytesgan import losses, ops
from bytesgan.errors import ContractError
from bytesgan.losses import (cnn_loss, cnn_loss_grad, feature_matching_loss,
                             feature_matching_loss_grad, labeled_loss,
                             labeled_loss_grad, optimal_discriminator_check,
                             unlabeled_loss_grad, unlabeled_fake_term,
                             unlabeled_real_term)

rng = np.random.default_rng(3)


# ---------------------------------------------------------------------------
# labeled branch
# ---------------------------------------------------------------------------

def test_labeled_loss_hand_values():
    # one-hot probabilities: loss 0
    logits = np.zeros((1, 15))
    logits[0, 4] = 60.0
    assert labeled_loss(logits, [4]).scalar == pytest.approx(0.0, abs=1e-12)
    # uniform over 15: ln 15
    assert labeled_loss(np.zeros((2, 15)), [0, 7]).scalar == pytest.approx(np.log(15.0))
    # logits [ln2, 0, 0] with the true label 0: -ln 0.5
    value = labeled_loss(np.array([[np.log(2.0), 0.0, 0.0]]), [0])
    assert value.scalar == pytest.approx(np.log(2.0))
    assert value.batch_size == 1


def test_labeled_loss_rejects_bad_labels():
    with pytest.raises(ContractError):
        labeled_loss(np.zeros((2, 3)), [0, 3])
    with pytest.raises(ContractError):
        labeled_loss(np.zeros((1, 3)), [-1])


def test_labeled_loss_gradient_matches_fd():
    logits = rng.normal(0, 2, (6, 5))
    labels = rng.integers(0, 5, 6)
    _, grad = labeled_loss_grad(logits, labels)
    num = ops.numerical_gradient(
        lambda ll: labeled_loss(ll, labels).scalar, logits.copy())
    assert ops.relative_error(grad, num) < 1e-5


# ---------------------------------------------------------------------------
# unlabeled branch
# ---------------------------------------------------------------------------

def test_unlabeled_terms_hand_values():
    # all logits 0, K=15: D = 15/16
    zeros = np.zeros((4, 15))
    assert unlabeled_real_term(zeros) == pytest.approx(-np.log(15.0 / 16.0))
    assert unlabeled_fake_term(zeros) == pytest.approx(np.log(16.0))
    value, _, _ = unlabeled_loss_grad(zeros, zeros)
    assert value.scalar == pytest.approx(-np.log(15.0 / 16.0) + np.log(16.0))


def test_unlabeled_loss_perfect_discriminator_limit():
    # realness -> 1 on real and -> 0 on fake drives the loss to 0
    real = np.full((3, 7), 20.0)    # huge Z
    fake = np.full((3, 7), -20.0)   # tiny Z
    value, _, _ = unlabeled_loss_grad(real, fake)
    assert value.scalar == pytest.approx(0.0, abs=1e-6)


def test_unlabeled_loss_stable_at_extreme_logits():
    for mag in (1e2, 1e3, 1e4):
        real = np.array([[mag, -mag, 0.0]])
        fake = np.array([[-mag, mag / 2, mag]])
        value, d_real, d_fake = unlabeled_loss_grad(real, fake)
        assert np.isfinite(value.scalar)
        assert value.scalar >= 0.0
        assert np.isfinite(d_real).all() and np.isfinite(d_fake).all()


def test_labeled_loss_stable_at_extreme_logits():
    logits = np.array([[1e4, -1e4, 0.0], [-1e4, -1e4, -1e4]])
    value, grad = labeled_loss_grad(logits, [1, 0])
    assert np.isfinite(value.scalar) and value.scalar >= 0.0
    assert np.isfinite(grad).all()


def test_unlabeled_loss_gradients_match_fd():
    real = rng.normal(0, 2, (4, 6))
    fake = rng.normal(0, 2, (5, 6))
    _, d_real, d_fake = unlabeled_loss_grad(real, fake)
    num_r = ops.numerical_gradient(
        lambda rr: unlabeled_loss_grad(rr, fake)[0].scalar, real.copy())
    num_f = ops.numerical_gradient(
        lambda ff: unlabeled_loss_grad(real, ff)[0].scalar, fake.copy())
    assert ops.relative_error(d_real, num_r) < 1e-5
    assert ops.relative_error(d_fake, num_f) < 1e-5


def test_realness_not_shift_invariant():
    # adding +c to every logit strictly increases realness, so the
    # unsupervised loss must not be treated as shift-invariant
    logits = rng.normal(0, 1, (10, 7))
    base = ops.sigmoid(ops.logsumexp(logits, axis=-1))
    shifted = ops.sigmoid(ops.logsumexp(logits + 3.0, axis=-1))
    assert np.all(shifted > base)
    base_term = unlabeled_real_term(logits)
    shifted_term = unlabeled_real_term(logits + 3.0)
    assert shifted_term < base_term  # -log D falls as D rises


# ---------------------------------------------------------------------------
# feature matching
# ---------------------------------------------------------------------------

def test_feature_matching_hand_values():
    same = rng.normal(0, 1, (8, 512))
    assert feature_matching_loss(same, same.copy()).scalar == pytest.approx(0.0)
    real = np.zeros((4, 3))
    fake = np.zeros((4, 3))
    fake[:, 0] = -1.0  # means differ by e1
    assert feature_matching_loss(real, fake).scalar == pytest.approx(1.0)
    real = np.tile([1.0, 2.0], (5, 1))
    fake = np.tile([4.0, 6.0], (5, 1))
    assert feature_matching_loss(real, fake).scalar == pytest.approx(25.0)


def test_feature_matching_rejects_dim_mismatch():
    with pytest.raises(ContractError):
        feature_matching_loss(np.zeros((2, 4)), np.zeros((2, 5)))


def test_feature_matching_gradients_match_fd():
    real = rng.normal(0, 1, (4, 6))
    fake = rng.normal(0, 1, (3, 6))
    _, d_real, d_fake = feature_matching_loss_grad(real, fake)
    num_r = ops.numerical_gradient(
        lambda rr: feature_matching_loss(rr, fake).scalar, real.copy())
    num_f = ops.numerical_gradient(
        lambda ff: feature_matching_loss(real, ff).scalar, fake.copy())
    assert ops.relative_error(d_real, num_r) < 1e-5
    assert ops.relative_error(d_fake, num_f) < 1e-5


# ---------------------------------------------------------------------------
# CNN loss
# ---------------------------------------------------------------------------

def test_cnn_loss_hand_values():
    probs = np.zeros((1, 4))
    probs[0, 2] = 1.0
    assert cnn_loss(probs, [2]).scalar == pytest.approx(0.0)
    uniform = np.full((3, 15), 1.0 / 15.0)
    assert cnn_loss(uniform, [0, 5, 14]).scalar == pytest.approx(np.log(15.0))
    assert cnn_loss(np.array([[0.7, 0.2, 0.1]]), [1]).scalar == pytest.approx(-np.log(0.2))


def test_cnn_loss_grad_equals_labeled_loss_grad():
    logits = rng.normal(0, 1, (4, 5))
    labels = rng.integers(0, 5, 4)
    v1, g1 = cnn_loss_grad(logits, labels)
    v2, g2 = labeled_loss_grad(logits, labels)
    assert v1.scalar == v2.scalar
    assert np.array_equal(g1, g2)
    # and it matches the probability-space definition
    assert v1.scalar == pytest.approx(cnn_loss(ops.softmax(logits), labels).scalar)


def test_all_losses_nonnegative_on_random_inputs():
    for _ in range(50):
        k = int(rng.integers(2, 16))
        logits = rng.normal(0, 5, (4, k))
        labels = rng.integers(0, k, 4)
        assert labeled_loss(logits, labels).scalar >= 0.0
        value, _, _ = unlabeled_loss_grad(logits, rng.normal(0, 5, (4, k)))
        assert value.scalar >= 0.0
        fm, _, _ = feature_matching_loss_grad(rng.normal(0, 1, (4, 8)),
                                              rng.normal(0, 1, (4, 8)))
        assert fm.scalar >= 0.0


# ---------------------------------------------------------------------------
# optimal discriminator (GAN theory utility)
# ---------------------------------------------------------------------------

def test_optimal_discriminator_equal_distributions():
    p = np.array([0.25, 0.25, 0.5])
    assert np.allclose(optimal_discriminator_check(p, p.copy()), 0.5, atol=1e-15)


def test_optimal_discriminator_hand_values():
    out = optimal_discriminator_check([0.8, 0.2], [0.2, 0.8])
    assert np.allclose(out, [0.8, 0.2], atol=1e-15)
    out = optimal_discriminator_check([0.5, 0.5, 0.0], [0.5, 0.0, 0.5])
    assert out[1] == 1.0  # generator never produces this point
    assert out[2] == 0.0


def test_optimal_discriminator_both_zero_convention():
    out = optimal_discriminator_check([0.5, 0.5, 0.0], [0.5, 0.5, 0.0])
    assert out[2] == 0.5


def test_optimal_discriminator_rejects_bad_inputs():
    with pytest.raises(ContractError):
        optimal_discriminator_check([0.5, 0.5], [1.0])
    with pytest.raises(ContractError):
        optimal_discriminator_check([0.7, 0.4], [0.5, 0.5])
    with pytest.raises(ContractError):
        optimal_discriminator_check([-0.1, 1.1], [0.5, 0.5])


def test_loss_values_carry_batch_size():
    value = labeled_loss(np.zeros((9, 3)), np.zeros(9, dtype=int))
    assert value.batch_size == 9
    assert isinstance(losses.LossValue(1.0, 2), losses.LossValue)
