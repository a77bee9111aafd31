"""Classification metrics, experiment orchestration, and the synthetic benchmark.

The synthetic dataset is the desk-scale stand-in for the full public corpus:
each class is a random byte motif planted at one of several offsets inside
class-agnostic payload noise, so a handful of labeled samples undercovers
the offset variants while a large unlabeled pool exposes them all. A
nearest-template oracle (which knows the true motifs) upper-bounds what any
classifier can do on it.

Experiment grids run one (count, seed) cell at a time, persist each cell
result under a content fingerprint, and skip already-finished cells on
rerun, so an interrupted sweep resumes without retraining.
"""

import csv
import dataclasses
import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import models, pbv
from .dataset import (ClassSchema, SamplePool, SplitSpec, TrafficDataset,
                      batches, make_splits)
from .errors import ConfigError
from .seeding import derive_rng
from .training import (CnnTrainConfig, SganTrainConfig, train_cnn, train_sgan)


# ---------------------------------------------------------------------------
# confusion matrix and metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """counts[true, predicted] over N classes."""

    counts: np.ndarray

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes):
        y_true = np.asarray(y_true, dtype=np.int64)
        y_pred = np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ConfigError("prediction/label length mismatch")
        counts = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts)

    @property
    def total(self):
        return int(self.counts.sum())

    def accuracy(self):
        return float(np.trace(self.counts)) / self.total if self.total else 0.0


def per_class_metrics(confusion: ConfusionMatrix):
    """(precision, recall, f1, zero_division flags) with the 0/0 -> 0 rule."""
    counts = confusion.counts.astype(np.float64)
    diag = np.diag(counts)
    pred_totals = counts.sum(axis=0)
    true_totals = counts.sum(axis=1)
    precision = np.divide(diag, pred_totals, out=np.zeros_like(diag),
                          where=pred_totals > 0)
    recall = np.divide(diag, true_totals, out=np.zeros_like(diag),
                       where=true_totals > 0)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros_like(diag),
                   where=pr > 0)
    flags = {
        "precision": [int(i) for i in np.flatnonzero(pred_totals == 0)],
        "recall": [int(i) for i in np.flatnonzero(true_totals == 0)],
    }
    return precision, recall, f1, flags


@dataclass
class EvalReport:
    accuracy: float
    precision: list
    recall: list
    f1: list
    support: list
    confusion: ConfusionMatrix
    classes: tuple
    zero_division: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "support": self.support,
            "confusion": self.confusion.counts.tolist(),
            "classes": list(self.classes),
            "zero_division": self.zero_division,
            "metadata": self.metadata,
        }

    def write_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_per_class_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", "precision", "recall", "f1", "support"])
            for i, name in enumerate(self.classes):
                writer.writerow([name, f"{self.precision[i]:.6f}",
                                 f"{self.recall[i]:.6f}", f"{self.f1[i]:.6f}",
                                 self.support[i]])

    def write_confusion_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["true\\pred"] + list(self.classes))
            for i, name in enumerate(self.classes):
                writer.writerow([name] + [int(v) for v in self.confusion.counts[i]])


def report_from_predictions(y_true, y_pred, classes, metadata=None) -> EvalReport:
    confusion = ConfusionMatrix.from_predictions(y_true, y_pred, len(classes))
    precision, recall, f1, flags = per_class_metrics(confusion)
    return EvalReport(
        accuracy=confusion.accuracy(),
        precision=[float(v) for v in precision],
        recall=[float(v) for v in recall],
        f1=[float(v) for v in f1],
        support=[int(v) for v in confusion.counts.sum(axis=1)],
        confusion=confusion, classes=tuple(classes),
        zero_division=flags, metadata=metadata or {})


# ---------------------------------------------------------------------------
# model evaluation
# ---------------------------------------------------------------------------

def predict_pool(params, pool: SamplePool, batch_size=256):
    """Argmax class predictions over a pool, in pool order."""
    dtype = np.dtype(params.config.dtype)
    preds = np.empty(pool.n, dtype=np.int64)
    done = 0
    # seeded stream would shuffle; predict in natural order instead
    for start in range(0, pool.n, batch_size):
        vec = pbv.normalize_octets(pool.octets[start:start + batch_size], dtype=dtype)
        if isinstance(params, models.DiscriminatorParams):
            out = models.discriminator_forward(
                params, models.reshape_vectors(vec, params.config))
            block = out.logits.argmax(axis=1)
        elif isinstance(params, models.CnnParams):
            block = models.cnn_forward(params, vec).argmax(axis=1)
        else:
            raise ConfigError(f"cannot classify with a {type(params).__name__}")
        preds[done:done + block.size] = block
        done += block.size
    return preds


def evaluate(model, pool: SamplePool, batch_size=256, metadata=None) -> EvalReport:
    """Score a checkpoint (path or loaded params) against a labeled pool."""
    if isinstance(model, (str, os.PathLike)):
        model = models.load_checkpoint(model)
    if isinstance(model, models.Checkpoint):
        if model.schema_names and pool.schema is not None \
                and tuple(model.schema_names) != pool.schema.names:
            raise ConfigError(
                f"checkpoint schema {list(model.schema_names)} does not match "
                f"pool schema {list(pool.schema.names)}")
        params = model.params
    else:
        params = model
    if pool.schema is None:
        raise ConfigError("evaluation pool has no class schema")
    if params.config.n_classes != pool.schema.n:
        raise ConfigError(
            f"model has {params.config.n_classes} classes, pool has {pool.schema.n}")
    if pool.n == 0 or (pool.labels < 0).any():
        raise ConfigError("evaluation needs a non-empty, fully labeled pool")
    preds = predict_pool(params, pool, batch_size=batch_size)
    meta = {"arch": models.ARCH_TAGS[type(params)],
            "fingerprint": models.config_fingerprint(params.config),
            "n_samples": int(pool.n)}
    meta.update(metadata or {})
    return report_from_predictions(pool.labels, preds, pool.schema.names, meta)


# ---------------------------------------------------------------------------
# synthetic benchmark dataset
# ---------------------------------------------------------------------------

SYNTH_MOTIF_LEN = 32
SYNTH_VARIANTS = 12
SYNTH_VARIANT_STRIDE = 74  # one row of the 20x74 model view per variant
SYNTH_PAYLOAD_FILL = 30
SYNTH_CORRUPT_PROB = 0.005
SYNTH_MIN_LEN = 960
SYNTH_MAX_LEN = 1480
_SYNTH_MOTIF_BASE = 10


def synthetic_templates(n_classes, seed, motif_len=SYNTH_MOTIF_LEN,
                        n_variants=SYNTH_VARIANTS,
                        variant_stride=SYNTH_VARIANT_STRIDE,
                        payload_fill=SYNTH_PAYLOAD_FILL):
    """(motifs (C, motif_len), offsets (V,), templates (C, V, 1480))."""
    rng = derive_rng(seed, "synthetic-motifs")
    motifs = rng.integers(128, 256, size=(n_classes, motif_len), dtype=np.int64)
    offsets = _SYNTH_MOTIF_BASE + variant_stride * np.arange(n_variants)
    templates = np.full((n_classes, n_variants, pbv.PBV_LENGTH), payload_fill,
                        dtype=np.uint8)
    for c in range(n_classes):
        for v, off in enumerate(offsets):
            templates[c, v, off:off + motif_len] = motifs[c]
    return motifs.astype(np.uint8), offsets, templates


def make_synthetic_dataset(n_classes, per_class, seed, out=None,
                           motif_len=SYNTH_MOTIF_LEN, n_variants=SYNTH_VARIANTS,
                           variant_stride=SYNTH_VARIANT_STRIDE,
                           payload_fill=SYNTH_PAYLOAD_FILL,
                           corrupt_prob=SYNTH_CORRUPT_PROB,
                           min_len=SYNTH_MIN_LEN, max_len=SYNTH_MAX_LEN) -> TrafficDataset:
    """Structured byte traffic with a known class oracle, in PBVD form.

    Each class is a random byte motif; a sample plants its class motif at
    one of several row-aligned offsets (the position variant) inside a
    constant payload fill, sprinkles per-byte corruption, and zero-pads a
    random datagram length. Few labeled samples undercover the variants
    while the unlabeled pool exposes them all, which is exactly the gap
    semi-supervised training can close.
    """
    if n_classes < 2:
        raise ConfigError("synthetic dataset needs at least 2 classes")
    motifs, offsets, _ = synthetic_templates(
        n_classes, seed, motif_len, n_variants, variant_stride, payload_fill)
    if offsets[-1] + motif_len > min_len:
        raise ConfigError("min_len too short for the last motif variant")
    rng = derive_rng(seed, "synthetic-samples")
    n = n_classes * per_class
    octets = np.zeros((n, pbv.PBV_LENGTH), dtype=np.uint8)
    labels = np.repeat(np.arange(n_classes, dtype=np.int32), per_class)
    lengths = rng.integers(min_len, max_len + 1, size=n)
    variant = rng.integers(0, n_variants, size=n)
    for i in range(n):
        length = int(lengths[i])
        row = np.full(length, payload_fill, dtype=np.int64)
        off = int(offsets[variant[i]])
        row[off:off + motif_len] = motifs[labels[i]]
        corrupt = rng.random(length) < corrupt_prob
        if corrupt.any():
            row[corrupt] = rng.integers(0, 256, size=int(corrupt.sum()))
        octets[i, :length] = row
    schema = ClassSchema(tuple(f"class_{i:02d}" for i in range(n_classes)))
    if out is not None:
        pbv.write_pbvd(out, octets, labels, schema.names)
    return TrafficDataset(octets=octets, labels=labels, schema=schema,
                          ids=np.arange(n, dtype=np.int64),
                          path=str(out) if out is not None else None)


def nearest_template_classify(octets, templates):
    """Oracle classifier: nearest (class, variant) template in L2 over bytes."""
    flat = templates.reshape(-1, templates.shape[-1]).astype(np.float32)
    x = np.asarray(octets, dtype=np.float32)
    d = (x * x).sum(axis=1, keepdims=True) - 2.0 * (x @ flat.T) \
        + (flat * flat).sum(axis=1)[None, :]
    return d.argmin(axis=1) // templates.shape[1]


# ---------------------------------------------------------------------------
# experiment grids
# ---------------------------------------------------------------------------

@dataclass
class CellResult:
    arm: str               # "sgan" | "cnn"
    labeled_per_class: int
    unlabeled_per_class: int | None
    seed: int
    accuracy: float
    report: dict
    cached: bool = False


def _dataset_digest(ds: TrafficDataset) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(ds.octets).tobytes())
    h.update(np.ascontiguousarray(ds.labels).tobytes())
    if ds.schema is not None:
        h.update("\x00".join(ds.schema.names).encode("utf-8"))
    return h.hexdigest()


def _cell_fingerprint(ds_digest, arm, split: SplitSpec, cfg, model_cfgs, seed):
    doc = {
        "dataset": ds_digest,
        "arm": arm,
        "split": dataclasses.asdict(split),
        "config": dataclasses.asdict(cfg),
        "models": {k: dataclasses.asdict(v) for k, v in model_cfgs.items()},
        "seed": seed,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _cell_store_dir(out_dir):
    cache = os.environ.get("BYTESGAN_CACHE_DIR")
    path = cache if cache else os.path.join(out_dir, "cells")
    os.makedirs(path, exist_ok=True)
    return path


def _load_cell(store, fingerprint):
    path = os.path.join(store, fingerprint + ".json")
    if os.path.exists(path):
        with open(path) as fh:
            return json.load(fh)
    return None


def _save_cell(store, fingerprint, doc):
    path = os.path.join(store, fingerprint + ".json")
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh, sort_keys=True)
    os.replace(tmp, path)


def _run_sgan_cell(ds, split, cfg, seed, disc_config, gen_config):
    splits = make_splits(ds, dataclasses.replace(split, seed=seed))
    disc, _, log = train_sgan(splits.labeled, splits.unlabeled, ds.schema,
                              dataclasses.replace(cfg, seed=seed),
                              disc_config=disc_config, gen_config=gen_config)
    report = evaluate(disc, splits.test,
                      metadata={"seed": seed, "split": dataclasses.asdict(split)})
    curve = [(r["step"], r["disc_loss"], r.get("gen_loss")) for r in log.steps]
    return report, curve


def _run_cnn_cell(ds, split, cfg, seed, cnn_config):
    splits = make_splits(ds, dataclasses.replace(split, seed=seed))
    params, log = train_cnn(splits.labeled, ds.schema,
                            dataclasses.replace(cfg, seed=seed),
                            cnn_config=cnn_config)
    report = evaluate(params, splits.test,
                      metadata={"seed": seed, "split": dataclasses.asdict(split)})
    curve = [(r["step"], r["loss"], None) for r in log.steps]
    return report, curve


def _summarize(values):
    arr = np.asarray(values, dtype=np.float64)
    return {
        "median": float(np.median(arr)),
        "mean": float(arr.mean()),
        "min": float(arr.min()),
        "max": float(arr.max()),
        "std": float(arr.std()),
    }


def _plot_loss_curve(curve, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps = [c[0] for c in curve]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, [c[1] for c in curve], label="discriminator loss")
    gen = [(s, g) for s, _, g in curve if g is not None]
    if gen:
        ax.plot([s for s, _ in gen], [g for _, g in gen], label="generator loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def _run_cells(jobs, cell_fns):
    if jobs <= 1:
        return [fn() for fn in cell_fns]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn) for fn in cell_fns]
        return [f.result() for f in futures]


@dataclass
class ExperimentResult:
    rows: list
    cells: list


def run_experiment_1(ds: TrafficDataset, unlabeled_counts, labeled_per_class,
                     cfg: SganTrainConfig, seeds, split: SplitSpec | None = None,
                     out_dir=None, jobs=1, disc_config=None,
                     gen_config=None) -> ExperimentResult:
    """Accuracy as a function of the unlabeled pool size, labeled count fixed."""
    split = split or SplitSpec(labeled_per_class=labeled_per_class)
    split = dataclasses.replace(split, labeled_per_class=labeled_per_class)
    ds_digest = _dataset_digest(ds)
    store = _cell_store_dir(out_dir) if out_dir is not None else None
    model_cfgs = {}
    if disc_config is not None:
        model_cfgs["discriminator"] = disc_config
    if gen_config is not None:
        model_cfgs["generator"] = gen_config

    def make_cell(count, seed):
        cell_split = dataclasses.replace(split, unlabeled_per_class=count)

        def run():
            fp = _cell_fingerprint(ds_digest, "sgan", cell_split, cfg, model_cfgs, seed)
            if store is not None:
                cached = _load_cell(store, fp)
                if cached is not None:
                    return CellResult(arm="sgan", labeled_per_class=labeled_per_class,
                                      unlabeled_per_class=count, seed=seed,
                                      accuracy=cached["accuracy"],
                                      report=cached["report"], cached=True)
            report, curve = _run_sgan_cell(ds, cell_split, cfg, seed,
                                           disc_config, gen_config)
            if store is not None:
                _save_cell(store, fp, {"accuracy": report.accuracy,
                                       "report": report.to_dict()})
            if out_dir is not None:
                _plot_loss_curve(curve,
                                 os.path.join(out_dir, f"loss_sgan_u{count}_s{seed}.png"),
                                 f"unlabeled={count} seed={seed}")
            return CellResult(arm="sgan", labeled_per_class=labeled_per_class,
                              unlabeled_per_class=count, seed=seed,
                              accuracy=report.accuracy, report=report.to_dict())

        return run

    cells = _run_cells(jobs, [make_cell(c, s) for c in unlabeled_counts for s in seeds])
    rows = []
    idx = 0
    for count in unlabeled_counts:
        accs = [cells[idx + j].accuracy for j in range(len(seeds))]
        idx += len(seeds)
        row = {"labeled": labeled_per_class, "unlabeled": count}
        row.update({f"accuracy_{k}": v for k, v in _summarize(accs).items()})
        row["accuracy"] = row.pop("accuracy_median")
        rows.append(row)
    result = ExperimentResult(rows=rows, cells=cells)
    if out_dir is not None:
        _write_exp1_outputs(result, out_dir)
    return result


def _write_exp1_outputs(result, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "experiment1_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["labeled", "unlabeled", "accuracy"])
        for row in result.rows:
            writer.writerow([row["labeled"], row["unlabeled"], f"{row['accuracy']:.6f}"])
    _write_cells_csv(result.cells, os.path.join(out_dir, "experiment1_cells.csv"))


def _write_cells_csv(cells, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["arm", "labeled", "unlabeled", "seed", "accuracy", "cached"])
        for c in cells:
            writer.writerow([c.arm, c.labeled_per_class,
                             "" if c.unlabeled_per_class is None else c.unlabeled_per_class,
                             c.seed, f"{c.accuracy:.6f}", int(c.cached)])


def run_experiment_2(ds: TrafficDataset, labeled_counts, cfg_sgan: SganTrainConfig,
                     cfg_cnn: CnnTrainConfig, seeds, split: SplitSpec | None = None,
                     out_dir=None, jobs=1, disc_config=None, gen_config=None,
                     cnn_config=None) -> ExperimentResult:
    """Semi-supervised vs supervised CNN on identical labeled pools.

    The unlabeled pool for the GAN arm is everything left over after the
    labeled selection, per class.
    """
    base_split = split or SplitSpec(labeled_per_class=1)
    ds_digest = _dataset_digest(ds)
    store = _cell_store_dir(out_dir) if out_dir is not None else None
    model_cfgs = {}
    if disc_config is not None:
        model_cfgs["discriminator"] = disc_config
    if gen_config is not None:
        model_cfgs["generator"] = gen_config
    if cnn_config is not None:
        model_cfgs["cnn"] = cnn_config

    def make_cell(arm, count, seed):
        cell_split = dataclasses.replace(base_split, labeled_per_class=count,
                                         unlabeled_per_class=None)

        def run():
            cfg = cfg_sgan if arm == "sgan" else cfg_cnn
            fp = _cell_fingerprint(ds_digest, arm, cell_split, cfg, model_cfgs, seed)
            if store is not None:
                cached = _load_cell(store, fp)
                if cached is not None:
                    return CellResult(arm=arm, labeled_per_class=count,
                                      unlabeled_per_class=None, seed=seed,
                                      accuracy=cached["accuracy"],
                                      report=cached["report"], cached=True)
            if arm == "sgan":
                report, curve = _run_sgan_cell(ds, cell_split, cfg_sgan, seed,
                                               disc_config, gen_config)
            else:
                report, curve = _run_cnn_cell(ds, cell_split, cfg_cnn, seed, cnn_config)
            if store is not None:
                _save_cell(store, fp, {"accuracy": report.accuracy,
                                       "report": report.to_dict()})
            if out_dir is not None:
                _plot_loss_curve(curve,
                                 os.path.join(out_dir, f"loss_{arm}_l{count}_s{seed}.png"),
                                 f"{arm} labeled={count} seed={seed}")
            return CellResult(arm=arm, labeled_per_class=count,
                              unlabeled_per_class=None, seed=seed,
                              accuracy=report.accuracy, report=report.to_dict())

        return run

    cell_fns = [make_cell(arm, count, seed)
                for count in labeled_counts for arm in ("sgan", "cnn")
                for seed in seeds]
    cells = _run_cells(jobs, cell_fns)
    rows = []
    idx = 0
    per_class_blocks = []
    for count in labeled_counts:
        sgan_cells = cells[idx:idx + len(seeds)]
        cnn_cells = cells[idx + len(seeds):idx + 2 * len(seeds)]
        idx += 2 * len(seeds)
        row = {"labeled": count}
        sgan_summary = _summarize([c.accuracy for c in sgan_cells])
        cnn_summary = _summarize([c.accuracy for c in cnn_cells])
        row["sgan_accuracy"] = sgan_summary["median"]
        row["cnn_accuracy"] = cnn_summary["median"]
        row.update({f"sgan_accuracy_{k}": v for k, v in sgan_summary.items()})
        row.update({f"cnn_accuracy_{k}": v for k, v in cnn_summary.items()})
        rows.append(row)
        per_class_blocks.append((count, sgan_cells, cnn_cells))
    result = ExperimentResult(rows=rows, cells=cells)
    if out_dir is not None:
        _write_exp2_outputs(result, per_class_blocks, out_dir)
    return result


def _write_exp2_outputs(result, per_class_blocks, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "experiment2_summary.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["labeled", "sgan_accuracy", "cnn_accuracy"])
        for row in result.rows:
            writer.writerow([row["labeled"], f"{row['sgan_accuracy']:.6f}",
                             f"{row['cnn_accuracy']:.6f}"])
    _write_cells_csv(result.cells, os.path.join(out_dir, "experiment2_cells.csv"))
    for count, sgan_cells, cnn_cells in per_class_blocks:
        classes = sgan_cells[0].report["classes"]
        for metric in ("precision", "recall", "f1"):
            path = os.path.join(out_dir, f"experiment2_{metric}_labeled{count}.csv")
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["class", "sgan", "cnn"])
                sgan_vals = np.median([c.report[metric] for c in sgan_cells], axis=0)
                cnn_vals = np.median([c.report[metric] for c in cnn_cells], axis=0)
                for i, name in enumerate(classes):
                    writer.writerow([name, f"{sgan_vals[i]:.6f}", f"{cnn_vals[i]:.6f}"])
