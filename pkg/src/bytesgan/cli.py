"""Command-line entry point: preprocess, train, eval, classify, experiment.

Exit codes are a stable scripting contract: 0 success, 2 configuration
error, 3 I/O or file-format error, 4 numerical divergence. All randomness
flows from seed fields in the JSON config (or --seed overrides); nothing
reads ambient entropy, so rerunning a command with identical inputs
reproduces its artifacts.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from . import evaluation, models, pbv
from .dataset import SplitSpec, full_pool, load_dataset, make_splits
from .errors import ConfigError, FormatError, TrainingDiverged
from .evaluation import (evaluate, make_synthetic_dataset, run_experiment_1,
                         run_experiment_2)
from .training import CnnTrainConfig, SganTrainConfig, train_cnn, train_sgan


# ---------------------------------------------------------------------------
# config document
# ---------------------------------------------------------------------------

_MODEL_SECTIONS = ("discriminator", "generator", "cnn")


def _strict_kwargs(cls, doc, where):
    allowed = {f.name for f in dataclasses.fields(cls)}
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return dict(doc)


def _build(cls, doc, where):
    try:
        return cls(**_strict_kwargs(cls, doc, where))
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclasses.dataclass
class ExperimentSpec:
    dataset: str | None = None
    synthetic: dict | None = None        # {"n_classes", "per_class", "seed"}
    unlabeled_counts: list | None = None
    labeled_counts: list | None = None
    labeled_per_class: int | None = None


@dataclasses.dataclass
class RunConfig:
    """Fully resolved run configuration; every default is materialized."""

    out_dir: str | None = None
    seeds: list = dataclasses.field(default_factory=lambda: [0])
    jobs: int = 1
    filter_policy: pbv.FilterPolicy = dataclasses.field(default_factory=pbv.FilterPolicy)
    split: SplitSpec | None = None
    sgan: SganTrainConfig | None = None
    cnn: CnnTrainConfig | None = None
    model_overrides: dict = dataclasses.field(default_factory=dict)
    experiment: ExperimentSpec | None = None

    @classmethod
    def from_file(cls, path):
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: invalid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FormatError(f"{path}: config must be a JSON object")
        known = {"out_dir", "seeds", "jobs", "filter_policy", "split", "sgan",
                 "cnn", "models", "experiment"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {sorted(unknown)}")
        cfg = cls()
        cfg.out_dir = doc.get("out_dir")
        cfg.seeds = list(doc.get("seeds", [0]))
        if not cfg.seeds or not all(isinstance(s, int) for s in cfg.seeds):
            raise ConfigError(f"{path}: 'seeds' must be a non-empty list of ints")
        cfg.jobs = int(doc.get("jobs", 1))
        if "filter_policy" in doc:
            cfg.filter_policy = pbv.FilterPolicy.from_dict(doc["filter_policy"])
        if "split" in doc:
            cfg.split = _build(SplitSpec, doc["split"], f"{path}: split").validate()
        if "sgan" in doc:
            cfg.sgan = _build(SganTrainConfig, doc["sgan"], f"{path}: sgan").validate()
        if "cnn" in doc:
            cfg.cnn = _build(CnnTrainConfig, doc["cnn"], f"{path}: cnn").validate()
        for section, body in doc.get("models", {}).items():
            if section not in _MODEL_SECTIONS:
                raise ConfigError(f"{path}: unknown model section {section!r}")
            if not isinstance(body, dict):
                raise ConfigError(f"{path}: model section {section!r} must be an object")
            cfg.model_overrides[section] = body
        if "experiment" in doc:
            cfg.experiment = _build(ExperimentSpec, doc["experiment"],
                                    f"{path}: experiment")
        return cfg

    def resolved_dict(self, extra=None):
        def maybe(obj):
            return dataclasses.asdict(obj) if obj is not None else None

        doc = {
            "out_dir": self.out_dir,
            "seeds": self.seeds,
            "jobs": self.jobs,
            "filter_policy": {
                **dataclasses.asdict(self.filter_policy),
                "dropped_protocols": sorted(self.filter_policy.dropped_protocols),
            },
            "split": maybe(self.split),
            "sgan": maybe(self.sgan),
            "cnn": maybe(self.cnn),
            "models": self.model_overrides,
            "experiment": maybe(self.experiment),
        }
        if extra:
            doc.update(extra)
        return doc

    def write_resolved(self, out_dir, extra=None):
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, "config.resolved.json")
        with open(path, "w") as fh:
            json.dump(self.resolved_dict(extra), fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path


def _model_config(cfg: RunConfig, section, cls, **required):
    body = dict(cfg.model_overrides.get(section, {}))
    body.update(required)
    return _build(cls, body, f"models.{section}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_preprocess(args):
    policy = pbv.FilterPolicy()
    if args.policy:
        try:
            overrides = json.loads(args.policy)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--policy must be valid JSON: {exc}") from exc
        policy = pbv.FilterPolicy.from_dict(overrides)
    classes, entries = pbv.load_manifest(args.manifest)
    for path, _ in entries:
        if not os.path.exists(path):
            raise FormatError(f"manifest references a missing capture: {path}")
    summary = pbv.build_dataset(entries, policy, args.out, classes=classes)
    print(json.dumps({"inputs": len(entries), "out": args.out,
                      **summary.to_dict()}, indent=2, sort_keys=True))
    return 0


def cmd_train(args):
    cfg = RunConfig.from_file(args.config)
    if args.seed is not None:
        if cfg.sgan is not None:
            cfg.sgan = dataclasses.replace(cfg.sgan, seed=args.seed)
        if cfg.cnn is not None:
            cfg.cnn = dataclasses.replace(cfg.cnn, seed=args.seed)
    ds = load_dataset(args.dataset)
    if ds.schema is None:
        raise ConfigError(f"{args.dataset}: dataset has no class schema")
    split = cfg.split or SplitSpec(labeled_per_class=1)
    splits = make_splits(ds, split)
    os.makedirs(args.out_dir, exist_ok=True)

    if args.arch == "sgan":
        if cfg.sgan is None:
            raise ConfigError(f"{args.config}: missing 'sgan' section")
        disc_config = _model_config(cfg, "discriminator", models.DiscriminatorConfig,
                                    n_classes=ds.schema.n, dtype=cfg.sgan.dtype)
        gen_config = _model_config(cfg, "generator", models.GeneratorConfig,
                                   dtype=cfg.sgan.dtype)
        resolved_models = {"discriminator": dataclasses.asdict(disc_config),
                           "generator": dataclasses.asdict(gen_config)}
        cfg.write_resolved(args.out_dir, {"models_resolved": resolved_models})
        train_sgan(splits.labeled, splits.unlabeled, ds.schema, cfg.sgan,
                   disc_config=disc_config, gen_config=gen_config,
                   eval_pool=splits.test if args.eval_each_epoch else None,
                   checkpoint_dir=args.out_dir,
                   log_path=os.path.join(args.out_dir, "train_log.jsonl"))
    else:
        if cfg.cnn is None:
            raise ConfigError(f"{args.config}: missing 'cnn' section")
        cnn_config = _model_config(cfg, "cnn", models.CnnConfig,
                                   n_classes=ds.schema.n, dtype=cfg.cnn.dtype)
        cfg.write_resolved(args.out_dir,
                           {"models_resolved": {"cnn": dataclasses.asdict(cnn_config)}})
        train_cnn(splits.labeled, ds.schema, cfg.cnn, cnn_config=cnn_config,
                  eval_pool=splits.test if args.eval_each_epoch else None,
                  checkpoint_dir=args.out_dir,
                  log_path=os.path.join(args.out_dir, "train_log.jsonl"))
    return 0


def cmd_eval(args):
    ds = load_dataset(args.dataset)
    if ds.schema is None:
        raise ConfigError(f"{args.dataset}: dataset has no class schema")
    pool = full_pool(ds, kind="test", labeled_only=True)
    report = evaluate(args.model, pool, metadata={"dataset": args.dataset,
                                                  "model": args.model})
    report.write_json(args.report)
    stem, _ = os.path.splitext(args.report)
    report.write_per_class_csv(stem + ".per_class.csv")
    report.write_confusion_csv(stem + ".confusion.csv")
    print(json.dumps({"accuracy": report.accuracy,
                      "n_samples": report.metadata["n_samples"]}, sort_keys=True))
    return 0


def cmd_classify(args):
    ckpt = models.load_checkpoint(args.model)
    policy = pbv.FilterPolicy()
    if args.policy:
        try:
            policy = pbv.FilterPolicy.from_dict(json.loads(args.policy))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"--policy must be valid JSON: {exc}") from exc
    class_names = ckpt.schema_names or tuple(
        str(i) for i in range(ckpt.params.config.n_classes))
    dtype = np.dtype(ckpt.params.config.dtype)

    kept_rows, kept_ordinals, dropped = [], [], []
    for ordinal, pkt in enumerate(pbv.read_capture(args.pcap)):
        decision = pbv.filter_packet(pkt, policy)
        if decision.keep:
            kept_rows.append(pbv.to_pbv(pkt, policy).octets)
            kept_ordinals.append(ordinal)
        else:
            dropped.append((ordinal, decision.reason))

    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["packet", "class", "confidence"])
        if kept_rows:
            vectors = pbv.normalize_octets(np.vstack(kept_rows), dtype=dtype)
            for start in range(0, len(kept_rows), 256):
                block = vectors[start:start + 256]
                if isinstance(ckpt.params, models.DiscriminatorParams):
                    out = models.discriminator_forward(
                        ckpt.params, models.reshape_vectors(block, ckpt.params.config))
                    probs = out.supervised_probs
                else:
                    probs = models.cnn_forward(ckpt.params, block)
                preds = probs.argmax(axis=1)
                for j in range(block.shape[0]):
                    writer.writerow([kept_ordinals[start + j],
                                     class_names[preds[j]],
                                     f"{float(probs[j, preds[j]]):.6f}"])
    sidecar = args.out + ".dropped.csv"
    with open(sidecar, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["packet", "reason"])
        writer.writerows(dropped)
    print(json.dumps({"classified": len(kept_rows), "dropped": len(dropped)},
                     sort_keys=True))
    return 0


def cmd_experiment(args):
    cfg = RunConfig.from_file(args.config)
    if cfg.experiment is None:
        raise ConfigError(f"{args.config}: missing 'experiment' section")
    exp = cfg.experiment
    jobs = args.jobs if args.jobs is not None else cfg.jobs
    os.makedirs(args.out_dir, exist_ok=True)
    cfg.write_resolved(args.out_dir)

    if args.mode == "synthetic":
        if not exp.synthetic:
            raise ConfigError("synthetic mode needs experiment.synthetic "
                              "{n_classes, per_class, seed}")
        synth = dict(exp.synthetic)
        unknown = set(synth) - {"n_classes", "per_class", "seed"}
        if unknown:
            raise ConfigError(f"unknown synthetic keys {sorted(unknown)}")
        ds = make_synthetic_dataset(
            synth["n_classes"], synth["per_class"], synth.get("seed", 0),
            out=os.path.join(args.out_dir, "synthetic.pbvd"))
    else:
        if not exp.dataset:
            raise ConfigError(f"{args.mode} mode needs experiment.dataset")
        ds = load_dataset(exp.dataset)
    if ds.schema is None:
        raise ConfigError("experiment dataset has no class schema")

    disc_config = _model_config(cfg, "discriminator", models.DiscriminatorConfig,
                                n_classes=ds.schema.n,
                                dtype=cfg.sgan.dtype if cfg.sgan else "float32") \
        if (cfg.model_overrides.get("discriminator") or cfg.sgan) else None
    gen_config = _model_config(cfg, "generator", models.GeneratorConfig,
                               dtype=cfg.sgan.dtype if cfg.sgan else "float32") \
        if (cfg.model_overrides.get("generator") or cfg.sgan) else None
    cnn_config = _model_config(cfg, "cnn", models.CnnConfig,
                               n_classes=ds.schema.n,
                               dtype=cfg.cnn.dtype if cfg.cnn else "float32") \
        if (cfg.model_overrides.get("cnn") or cfg.cnn) else None

    ran_any = False
    if args.mode in ("exp1", "synthetic") and exp.unlabeled_counts is not None:
        if cfg.sgan is None:
            raise ConfigError("experiment 1 needs an 'sgan' config section")
        if exp.labeled_per_class is None:
            raise ConfigError("experiment 1 needs experiment.labeled_per_class")
        result = run_experiment_1(
            ds, exp.unlabeled_counts, exp.labeled_per_class, cfg.sgan,
            cfg.seeds, split=cfg.split, out_dir=args.out_dir, jobs=jobs,
            disc_config=disc_config, gen_config=gen_config)
        for row in result.rows:
            print(json.dumps(row, sort_keys=True))
        ran_any = True
    if args.mode in ("exp2", "synthetic") and exp.labeled_counts is not None:
        if cfg.sgan is None or cfg.cnn is None:
            raise ConfigError("experiment 2 needs 'sgan' and 'cnn' config sections")
        result = run_experiment_2(
            ds, exp.labeled_counts, cfg.sgan, cfg.cnn, cfg.seeds,
            split=cfg.split, out_dir=args.out_dir, jobs=jobs,
            disc_config=disc_config, gen_config=gen_config, cnn_config=cnn_config)
        for row in result.rows:
            print(json.dumps(row, sort_keys=True))
        ran_any = True
    if not ran_any:
        raise ConfigError("experiment config defines no grid for this mode "
                          "(unlabeled_counts for exp1, labeled_counts for exp2)")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="bytesgan",
        description="Semi-supervised GAN traffic classification toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="build a PBVD dataset from captures")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="JSON filter-policy overrides")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the GAN pair or the CNN baseline")
    p.add_argument("arch", choices=["sgan", "cnn"])
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--eval-each-epoch", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint against a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("classify", help="per-packet predictions for a capture")
    p.add_argument("--model", required=True)
    p.add_argument("--pcap", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--policy", help="JSON filter-policy overrides")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("experiment", help="run an experiment grid")
    p.add_argument("mode", choices=["exp1", "exp2", "synthetic"])
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--jobs", type=int)
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
