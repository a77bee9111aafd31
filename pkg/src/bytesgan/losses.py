"""Loss branches for the semi-supervised GAN and the CNN baseline.

All losses are minimized negative log-likelihoods averaged over the batch,
computed in the log domain from logits so they stay finite for logit
magnitudes far beyond anything training produces. The realness head
D = Z/(Z+1) with Z = sum_k exp(logit_k) never materializes Z: both
-log D and -log(1-D) reduce to softplus of the log-sum-exp of the logits.

Each loss has a *_grad companion returning the analytic gradient w.r.t.
its logit/feature inputs; the training loop feeds those into the model
backward passes.
"""

from dataclasses import dataclass

import numpy as np

from . import ops
from .errors import ContractError
from .models import DiscriminatorOutput


@dataclass(frozen=True)
class LossValue:
    """A batch-averaged scalar loss."""

    scalar: float
    batch_size: int


def _as_logits(out):
    if isinstance(out, DiscriminatorOutput):
        return out.logits
    return np.asarray(out)


def _check_labels(labels, n_classes):
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(
            f"label out of range [0, {n_classes}): {int(labels.min())}..{int(labels.max())}")
    return labels


# ---------------------------------------------------------------------------
# labeled branch: class NLL over the K real classes
# ---------------------------------------------------------------------------

def labeled_loss(out, labels) -> LossValue:
    """Mean -log softmax(logits)[label] over a labeled batch."""
    value, _ = labeled_loss_grad(_as_logits(out), labels)
    return value


def labeled_loss_grad(logits, labels):
    logits = np.asarray(logits)
    labels = _check_labels(labels, logits.shape[1])
    b = logits.shape[0]
    logp = ops.log_softmax(logits.astype(np.float64))
    value = float(-logp[np.arange(b), labels].mean())
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    return LossValue(value, b), dlogits.astype(logits.dtype)


# ---------------------------------------------------------------------------
# unlabeled branch: realness NLL on real data + fake NLL on generated data
# ---------------------------------------------------------------------------

def unlabeled_loss(real_out, fake_out) -> LossValue:
    """mean -log D(real) + mean -log(1 - D(fake)), D = Z/(Z+1)."""
    real_logits = _as_logits(real_out)
    fake_logits = _as_logits(fake_out)
    value, _, _ = unlabeled_loss_grad(real_logits, fake_logits)
    return value


def unlabeled_loss_grad(real_logits, fake_logits):
    real_logits = np.asarray(real_logits)
    fake_logits = np.asarray(fake_logits)
    b_real, b_fake = real_logits.shape[0], fake_logits.shape[0]

    logz_real = ops.logsumexp(real_logits.astype(np.float64), axis=-1)
    logz_fake = ops.logsumexp(fake_logits.astype(np.float64), axis=-1)
    real_term = float(ops.softplus(-logz_real).mean())   # -log D(x)
    fake_term = float(ops.softplus(logz_fake).mean())    # -log(1 - D(G(z)))

    # d/dlogit softplus(-+logZ) = -+sigmoid(-+logZ) * softmax(logits)
    sm_real = ops.softmax(real_logits.astype(np.float64))
    sm_fake = ops.softmax(fake_logits.astype(np.float64))
    d_real = (-(ops.sigmoid(-logz_real))[:, None] * sm_real / b_real)
    d_fake = ((ops.sigmoid(logz_fake))[:, None] * sm_fake / b_fake)
    value = LossValue(real_term + fake_term, b_real + b_fake)
    return value, d_real.astype(real_logits.dtype), d_fake.astype(fake_logits.dtype)


def unlabeled_real_term(logits) -> float:
    """The -log D(real) part alone (log reporting convenience)."""
    logz = ops.logsumexp(np.asarray(logits).astype(np.float64), axis=-1)
    return float(ops.softplus(-logz).mean())


def unlabeled_fake_term(logits) -> float:
    """The -log(1 - D(fake)) part alone."""
    logz = ops.logsumexp(np.asarray(logits).astype(np.float64), axis=-1)
    return float(ops.softplus(logz).mean())


# ---------------------------------------------------------------------------
# feature matching: generator objective
# ---------------------------------------------------------------------------

def feature_matching_loss(real_features, fake_features) -> LossValue:
    """Squared L2 distance between batch-mean real and fake features."""
    value, _, _ = feature_matching_loss_grad(real_features, fake_features)
    return value


def feature_matching_loss_grad(real_features, fake_features):
    real_features = np.asarray(real_features)
    fake_features = np.asarray(fake_features)
    if real_features.shape[1] != fake_features.shape[1]:
        raise ContractError(
            f"feature dims differ: {real_features.shape[1]} vs {fake_features.shape[1]}")
    diff = (real_features.mean(axis=0, dtype=np.float64)
            - fake_features.mean(axis=0, dtype=np.float64))
    value = float(diff @ diff)
    d_real = np.broadcast_to(2.0 * diff / real_features.shape[0],
                             real_features.shape).astype(real_features.dtype)
    d_fake = np.broadcast_to(-2.0 * diff / fake_features.shape[0],
                             fake_features.shape).astype(fake_features.dtype)
    return (LossValue(value, fake_features.shape[0]), d_real, d_fake)


# ---------------------------------------------------------------------------
# CNN baseline: categorical cross-entropy
# ---------------------------------------------------------------------------

def cnn_loss(probs, labels) -> LossValue:
    """Mean -log p[label] over normalized probability rows."""
    probs = np.asarray(probs)
    labels = _check_labels(labels, probs.shape[1])
    b = probs.shape[0]
    picked = probs[np.arange(b), labels].astype(np.float64)
    # probability rows come from a softmax and are strictly positive; the
    # floor only guards against denormal underflow on pathological inputs
    value = float(-np.log(np.maximum(picked, np.finfo(np.float64).tiny)).mean())
    return LossValue(value, b)


def cnn_loss_grad(logits, labels):
    """Log-domain cross-entropy from logits; the training path."""
    return labeled_loss_grad(logits, labels)


# ---------------------------------------------------------------------------
# GAN theory utility: pointwise optimal discriminator on finite supports
# ---------------------------------------------------------------------------

def optimal_discriminator_check(p_data, p_g, atol=1e-9):
    """p_data(x) / (p_data(x) + p_g(x)) per support point.

    Both arguments are discrete distributions over the same finite support;
    points where both densities vanish get the limit convention 0.5.
    """
    p_data = np.asarray(p_data, dtype=np.float64)
    p_g = np.asarray(p_g, dtype=np.float64)
    if p_data.shape != p_g.shape:
        raise ContractError(f"support mismatch: {p_data.shape} vs {p_g.shape}")
    for name, dist in (("p_data", p_data), ("p_g", p_g)):
        if (dist < 0).any():
            raise ContractError(f"{name} has negative mass")
        if abs(dist.sum() - 1.0) > atol:
            raise ContractError(f"{name} sums to {dist.sum():.12f}, not 1")
    total = p_data + p_g
    out = np.full_like(p_data, 0.5)
    nz = total > 0
    out[nz] = p_data[nz] / total[nz]
    return out
