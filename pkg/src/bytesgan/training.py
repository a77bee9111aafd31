"""Alternating GAN training and the supervised CNN baseline loop.

One iteration follows the alternating recipe: with the generator frozen,
the discriminator takes k Adam steps on labeled class NLL plus the
realness/fake branches; with the discriminator frozen, the generator takes
one Adam step on feature matching between mean real and mean generated
hidden features. Optimizer steps are pure functions returning new parameter
bundles, so a (pools, config) pair fully determines the parameter
trajectory on a fixed backend.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, models, ops
from .dataset import SamplePool, batches, cycle_batches
from .errors import ConfigError, ContractError, TrainingDiverged
from .models import (CnnConfig, DiscriminatorConfig, GeneratorConfig,
                     discriminator_apply, discriminator_backward,
                     generator_apply, generator_backward, cnn_apply,
                     cnn_backward, init_cnn, init_discriminator,
                     init_generator, reshape_vectors, sample_noise,
                     save_checkpoint, tree_map)
from .seeding import derive_rng, derive_seed


# ---------------------------------------------------------------------------
# configs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SganTrainConfig:
    epochs: int
    seed: int
    batch_size: int = 256
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    disc_steps_per_gen_step: int = 1
    noise_dim: int = 100
    noise_prior: str = "uniform"  # "uniform" on [-1,1] or "gaussian"
    labeled_weight: float = 1.0
    unlabeled_weight: float = 1.0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    dtype: str = "float32"

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.disc_steps_per_gen_step < 1:
            raise ConfigError("disc_steps_per_gen_step must be >= 1")
        if self.noise_prior not in ("uniform", "gaussian"):
            raise ConfigError(f"unknown noise prior {self.noise_prior!r}")
        return self


@dataclass(frozen=True)
class CnnTrainConfig:
    epochs: int
    seed: int
    batch_size: int = 128
    learning_rate: float = 1e-3
    rmsprop_rho: float = 0.9
    rmsprop_epsilon: float = 1e-8
    checkpoint_every: int = 0
    dtype: str = "float32"

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        return self


# ---------------------------------------------------------------------------
# optimizers as pure steps over parameter bundles
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: object
    v: object
    t: int = 0


def init_adam_state(params) -> AdamState:
    zeros = tree_map(np.zeros_like, params)
    return AdamState(m=zeros, v=tree_map(np.zeros_like, params), t=0)


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999,
              epsilon=1e-8):
    """One bias-corrected Adam update; returns (new params, new state)."""
    _check_tree_shapes(params, grads, state.m)
    t = state.t + 1
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for (name, p), (_, g), (_, m), (_, v) in zip(
            models.array_fields(params), models.array_fields(grads),
            models.array_fields(state.m), models.array_fields(state.v)):
        new_p[name], new_m[name], new_v[name] = ops.adam_update(
            p, g, m, v, lr, beta1, beta2, epsilon, c1, c2)
    cls = type(params)
    cfg = params.config
    return (cls(config=cfg, **new_p),
            AdamState(m=cls(config=cfg, **new_m), v=cls(config=cfg, **new_v), t=t))


@dataclass
class RmspropState:
    v: object
    t: int = 0


def init_rmsprop_state(params) -> RmspropState:
    return RmspropState(v=tree_map(np.zeros_like, params), t=0)


def rmsprop_step(params, grads, state: RmspropState, lr, rho=0.9, epsilon=1e-8):
    """One RMSprop update; returns (new params, new state)."""
    _check_tree_shapes(params, grads, state.v)
    new_p, new_v = {}, {}
    for (name, p), (_, g), (_, v) in zip(
            models.array_fields(params), models.array_fields(grads),
            models.array_fields(state.v)):
        new_p[name], new_v[name] = ops.rmsprop_update(p, g, v, lr, rho, epsilon)
    cls = type(params)
    cfg = params.config
    return (cls(config=cfg, **new_p),
            RmspropState(v=cls(config=cfg, **new_v), t=state.t + 1))


def _check_tree_shapes(params, grads, state_tree):
    for (name, p), (_, g), (_, s) in zip(models.array_fields(params),
                                         models.array_fields(grads),
                                         models.array_fields(state_tree)):
        if p.shape != g.shape or p.shape != s.shape:
            raise ContractError(
                f"shape mismatch on {name}: param {p.shape}, grad {g.shape}, state {s.shape}")


# ---------------------------------------------------------------------------
# train log
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def add_step(self, record):
        self.steps.append(record)

    def add_epoch(self, record):
        self.epochs.append(record)

    def write_jsonl(self, path):
        with open(path, "w") as fh:
            for rec in self.steps:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
            for rec in self.epochs:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")

    @staticmethod
    def read_jsonl(path):
        log = TrainLog()
        with open(path) as fh:
            for line in fh:
                rec = json.loads(line)
                if "epoch_end" in rec:
                    log.epochs.append(rec)
                else:
                    log.steps.append(rec)
        return log


# ---------------------------------------------------------------------------
# single optimization steps (exposed for parameter-isolation tests)
# ---------------------------------------------------------------------------

def sgan_disc_step(disc, gen, d_state, labeled_batch, unlabeled_batch, noise,
                   cfg: SganTrainConfig):
    """One discriminator Adam step with the generator frozen.

    Returns (new disc params, new state, branch losses dict). The generator
    bundle is only read, never written. unlabeled_batch may be None, which
    drops the realness/fake branches (supervised-only training).
    """
    parts = [reshape_vectors(labeled_batch.vectors, disc.config)]
    n_lab = parts[0].shape[0]
    n_unl = 0
    if unlabeled_batch is not None:
        fake = models.generator_forward(gen, noise)
        parts.append(reshape_vectors(unlabeled_batch.vectors, disc.config))
        n_unl = parts[1].shape[0]
        parts.append(fake)
    x = parts[0] if len(parts) == 1 else np.concatenate(parts, axis=0)
    out, cache = discriminator_apply(disc, x)

    lab_logits = out.logits[:n_lab]
    lab_value, d_lab = losses.labeled_loss_grad(lab_logits, labeled_batch.labels)
    dlogits = np.zeros_like(out.logits)
    dlogits[:n_lab] = cfg.labeled_weight * d_lab

    record = {"disc_labeled": lab_value.scalar, "disc_unlabeled": None}
    total = cfg.labeled_weight * lab_value.scalar
    if unlabeled_batch is not None:
        real_logits = out.logits[n_lab:n_lab + n_unl]
        fake_logits = out.logits[n_lab + n_unl:]
        unl_value, d_real, d_fake = losses.unlabeled_loss_grad(real_logits, fake_logits)
        dlogits[n_lab:n_lab + n_unl] = cfg.unlabeled_weight * d_real
        dlogits[n_lab + n_unl:] = cfg.unlabeled_weight * d_fake
        record["disc_unlabeled"] = unl_value.scalar
        total += cfg.unlabeled_weight * unl_value.scalar
    record["disc_loss"] = total

    grads, _ = discriminator_backward(disc, cache, dlogits)
    new_disc, new_state = adam_step(disc, grads, d_state, cfg.learning_rate,
                                    cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    return new_disc, new_state, record


def sgan_gen_step(disc, gen, g_state, real_batch, noise, cfg: SganTrainConfig):
    """One generator Adam step on feature matching with the discriminator frozen.

    Returns (new gen params, new state, loss scalar).
    """
    real_x = reshape_vectors(real_batch.vectors, disc.config)
    real_out = models.discriminator_forward(disc, real_x)
    fake, g_cache = generator_apply(gen, noise)
    fake_out, d_cache = discriminator_apply(disc, fake)

    fm_value, _, d_fake_feats = losses.feature_matching_loss_grad(
        real_out.features, fake_out.features)
    _, dx_fake = discriminator_backward(
        disc, d_cache, np.zeros_like(fake_out.logits), dfeatures=d_fake_feats)
    grads, _ = generator_backward(gen, g_cache, dx_fake)
    new_gen, new_state = adam_step(gen, grads, g_state, cfg.learning_rate,
                                   cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon)
    return new_gen, new_state, fm_value.scalar


# ---------------------------------------------------------------------------
# SGAN training loop
# ---------------------------------------------------------------------------

def train_sgan(labeled: SamplePool, unlabeled, schema, cfg: SganTrainConfig,
               disc_config=None, gen_config=None, eval_pool=None,
               checkpoint_dir=None, log_path=None, on_step=None):
    """Alternating semi-supervised GAN training.

    An epoch is one pass over the unlabeled pool (the larger pool), with
    labeled batches cycled to match; with an empty unlabeled pool the run
    degenerates to supervised-only discriminator training and the generator
    is left at its initialization. Returns (disc, gen, TrainLog).
    """
    cfg.validate()
    if labeled is None or labeled.n == 0:
        raise ConfigError("labeled pool is empty")
    if schema is None or labeled.labels.max() >= schema.n:
        raise ConfigError("labeled pool labels exceed the class schema")
    dtype = np.dtype(cfg.dtype)
    disc_config = disc_config or DiscriminatorConfig(n_classes=schema.n, dtype=cfg.dtype)
    gen_config = gen_config or GeneratorConfig(noise_dim=cfg.noise_dim, dtype=cfg.dtype)
    if disc_config.n_classes != schema.n:
        raise ConfigError("discriminator n_classes does not match the schema")
    if gen_config.out_h * gen_config.out_w * gen_config.out_channels != \
            disc_config.in_h * disc_config.in_w * disc_config.in_channels:
        raise ConfigError("generator output size does not match discriminator input")

    disc = init_discriminator(disc_config, derive_seed(cfg.seed, "disc-init"))
    gen = init_generator(gen_config, derive_seed(cfg.seed, "gen-init"))
    d_state = init_adam_state(disc)
    g_state = init_adam_state(gen)
    noise_rng = derive_rng(cfg.seed, "noise")
    lab_seed = derive_seed(cfg.seed, "labeled-order")
    unl_seed = derive_seed(cfg.seed, "unlabeled-order")

    semi = unlabeled is not None and unlabeled.n > 0
    lab_stream = cycle_batches(labeled, cfg.batch_size, lab_seed, dtype=dtype)
    log = TrainLog()
    step = 0
    k = cfg.disc_steps_per_gen_step

    def diverged(what):
        ckpt = None
        if checkpoint_dir is not None:
            _write_checkpoints(checkpoint_dir, disc, gen, schema, tag="diagnostic")
            ckpt = str(checkpoint_dir)
        raise TrainingDiverged(f"non-finite {what} at step {step}", checkpoint_dir=ckpt)

    for epoch in range(cfg.epochs):
        if semi:
            epoch_stream = batches(unlabeled, cfg.batch_size, unl_seed, epoch, dtype=dtype)
        else:
            epoch_stream = batches(labeled, cfg.batch_size, lab_seed, epoch, dtype=dtype)
        since_gen = 0
        for drive_batch in epoch_stream:
            t0 = time.perf_counter()
            if semi:
                lab_batch = next(lab_stream)
                unl_batch = drive_batch
                noise = sample_noise(noise_rng, unl_batch.vectors.shape[0],
                                     cfg.noise_dim, cfg.noise_prior, dtype)
            else:
                lab_batch, unl_batch, noise = drive_batch, None, None
            disc, d_state, record = sgan_disc_step(
                disc, gen, d_state, lab_batch, unl_batch, noise, cfg)
            if not np.isfinite(record["disc_loss"]):
                diverged("discriminator loss")

            record.update(step=step, epoch=epoch, gen_loss=None)
            since_gen += 1
            if semi and since_gen >= k:
                since_gen = 0
                noise = sample_noise(noise_rng, unl_batch.vectors.shape[0],
                                     cfg.noise_dim, cfg.noise_prior, dtype)
                gen, g_state, gen_loss = sgan_gen_step(
                    disc, gen, g_state, unl_batch, noise, cfg)
                if not np.isfinite(gen_loss):
                    diverged("generator loss")
                record["gen_loss"] = gen_loss
            record["wall_clock"] = time.perf_counter() - t0
            log.add_step(record)
            if on_step is not None:
                on_step(step, record, disc, gen)
            step += 1

        epoch_record = {"epoch_end": epoch}
        if eval_pool is not None and eval_pool.n > 0:
            epoch_record["heldout_accuracy"] = _pool_accuracy_disc(disc, eval_pool, dtype)
        log.add_epoch(epoch_record)
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
            _write_checkpoints(checkpoint_dir, disc, gen, schema, tag=f"epoch{epoch + 1:04d}")

    if checkpoint_dir is not None:
        _write_checkpoints(checkpoint_dir, disc, gen, schema, tag=None)
    if log_path is not None:
        log.write_jsonl(log_path)
    return disc, gen, log


def _write_checkpoints(checkpoint_dir, disc, gen, schema, tag):
    os.makedirs(checkpoint_dir, exist_ok=True)
    suffix = "" if tag is None else f"_{tag}"
    names = schema.names if schema is not None else ()
    save_checkpoint(os.path.join(checkpoint_dir, f"discriminator{suffix}.bsgm"), disc, names)
    save_checkpoint(os.path.join(checkpoint_dir, f"generator{suffix}.bsgm"), gen, names)


def _pool_accuracy_disc(disc, pool, dtype, batch_size=512):
    correct = 0
    for batch in batches(pool, batch_size, seed=0, epoch=0, dtype=dtype):
        out = models.discriminator_forward(
            disc, reshape_vectors(batch.vectors, disc.config))
        correct += int((out.logits.argmax(axis=1) == batch.labels).sum())
    return correct / pool.n


# ---------------------------------------------------------------------------
# CNN baseline training loop
# ---------------------------------------------------------------------------

def train_cnn(labeled: SamplePool, schema, cfg: CnnTrainConfig, cnn_config=None,
              eval_pool=None, checkpoint_dir=None, log_path=None, on_step=None):
    """Minibatch RMSprop on categorical cross-entropy. Returns (params, log)."""
    cfg.validate()
    if labeled is None or labeled.n == 0:
        raise ConfigError("labeled pool is empty")
    if schema is None or labeled.labels.max() >= schema.n:
        raise ConfigError("labeled pool labels exceed the class schema")
    dtype = np.dtype(cfg.dtype)
    cnn_config = cnn_config or CnnConfig(n_classes=schema.n, dtype=cfg.dtype)
    if cnn_config.n_classes != schema.n:
        raise ConfigError("cnn n_classes does not match the schema")

    params = init_cnn(cnn_config, derive_seed(cfg.seed, "cnn-init"))
    state = init_rmsprop_state(params)
    order_seed = derive_seed(cfg.seed, "cnn-order")
    log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        for batch in batches(labeled, cfg.batch_size, order_seed, epoch, dtype=dtype):
            t0 = time.perf_counter()
            _, logits, cache = cnn_apply(params, batch.vectors)
            value, dlogits = losses.cnn_loss_grad(logits, batch.labels)
            if not np.isfinite(value.scalar):
                ckpt = None
                if checkpoint_dir is not None:
                    os.makedirs(checkpoint_dir, exist_ok=True)
                    save_checkpoint(os.path.join(checkpoint_dir, "cnn_diagnostic.bsgm"),
                                    params, schema.names)
                    ckpt = str(checkpoint_dir)
                raise TrainingDiverged(f"non-finite cnn loss at step {step}",
                                       checkpoint_dir=ckpt)
            grads = cnn_backward(params, cache, dlogits)
            params, state = rmsprop_step(params, grads, state, cfg.learning_rate,
                                         cfg.rmsprop_rho, cfg.rmsprop_epsilon)
            record = {"step": step, "epoch": epoch, "loss": value.scalar,
                      "wall_clock": time.perf_counter() - t0}
            log.add_step(record)
            if on_step is not None:
                on_step(step, record, params)
            step += 1
        epoch_record = {"epoch_end": epoch}
        if eval_pool is not None and eval_pool.n > 0:
            epoch_record["heldout_accuracy"] = _pool_accuracy_cnn(params, eval_pool, dtype)
        log.add_epoch(epoch_record)
        if checkpoint_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0 and epoch + 1 < cfg.epochs:
            os.makedirs(checkpoint_dir, exist_ok=True)
            save_checkpoint(os.path.join(checkpoint_dir, f"cnn_epoch{epoch + 1:04d}.bsgm"),
                            params, schema.names)

    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        save_checkpoint(os.path.join(checkpoint_dir, "cnn.bsgm"), params, schema.names)
    if log_path is not None:
        log.write_jsonl(log_path)
    return params, log


def _pool_accuracy_cnn(params, pool, dtype, batch_size=128):
    correct = 0
    for batch in batches(pool, batch_size, seed=0, epoch=0, dtype=dtype):
        probs = models.cnn_forward(params, batch.vectors)
        correct += int((probs.argmax(axis=1) == batch.labels).sum())
    return correct / pool.n
