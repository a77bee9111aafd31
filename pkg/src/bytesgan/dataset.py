"""Dataset loading, split construction, and seeded minibatch streams.

Samples live in memory as raw octet rows (uint8, one row per packet) and
are normalized to [-1, 1] floats only when a batch is materialized, so the
on-disk representation stays byte-exact. Every sample carries a stable
integer identity (its row ordinal in the source file), which is what the
split-disjointness guarantees are stated over.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import pbv
from .errors import CapacityError, ConfigError, FormatError
from .seeding import derive_rng


@dataclass(frozen=True)
class ClassSchema:
    """Ordered class names; index in the tuple is the label integer."""

    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if len(self.names) < 2:
            raise ConfigError("a class schema needs at least 2 classes")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("duplicate class names in schema")
        if any(not isinstance(n, str) or not n for n in self.names):
            raise ConfigError("class names must be non-empty strings")

    @property
    def n(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)


@dataclass
class TrafficDataset:
    """All samples from one PBVD file plus the embedded schema."""

    octets: np.ndarray          # (n, 1480) uint8
    labels: np.ndarray          # (n,) int32, -1 for unlabeled
    schema: ClassSchema | None  # None when the file declares no classes
    ids: np.ndarray             # (n,) int64 row ordinals
    path: str | None = None

    @property
    def n(self):
        return self.octets.shape[0]

    def class_counts(self):
        """Labeled sample count per class index."""
        n_classes = self.schema.n if self.schema else 0
        counts = np.zeros(n_classes, dtype=np.int64)
        mask = self.labels >= 0
        if mask.any():
            counts += np.bincount(self.labels[mask], minlength=n_classes)
        return counts


def load_dataset(path) -> TrafficDataset:
    """Read a PBVD file back into memory, validating header against content."""
    with open(path, "rb") as fh:
        head = fh.read(4)
        if head != pbv.PBVD_MAGIC:
            raise FormatError(f"{path}: not a PBVD dataset (bad magic)")
        raw = fh.read(2 + 2)
        if len(raw) != 4:
            raise FormatError(f"{path}: truncated header")
        version, n_classes = struct.unpack("<HH", raw)
        if version != pbv.PBVD_VERSION:
            raise FormatError(f"{path}: unsupported PBVD version {version}")
        names = []
        for i in range(n_classes):
            raw = fh.read(2)
            if len(raw) != 2:
                raise FormatError(f"{path}: truncated class table")
            (ln,) = struct.unpack("<H", raw)
            blob = fh.read(ln)
            if len(blob) != ln:
                raise FormatError(f"{path}: truncated class table")
            names.append(blob.decode("utf-8"))
        raw = fh.read(8)
        if len(raw) != 8:
            raise FormatError(f"{path}: truncated header")
        (n_samples,) = struct.unpack("<Q", raw)
        record = 2 + pbv.PBV_LENGTH
        body = fh.read()
    if len(body) != n_samples * record:
        raise FormatError(
            f"{path}: header declares {n_samples} samples but body holds "
            f"{len(body) // record} complete records")
    rows = np.frombuffer(body, dtype=np.uint8).reshape(n_samples, record)
    labels_u16 = rows[:, :2].copy().view("<u2").reshape(n_samples)
    octets = rows[:, 2:].copy()
    labels = labels_u16.astype(np.int32)
    labels[labels_u16 == pbv.PBVD_UNLABELED] = -1
    if n_classes and labels.size and labels.max() >= n_classes:
        raise FormatError(
            f"{path}: label index {int(labels.max())} outside the "
            f"{n_classes}-class schema")
    if n_classes == 0 and (labels >= 0).any():
        raise FormatError(f"{path}: labeled samples but an empty class table")
    schema = ClassSchema(names) if n_classes else None
    return TrafficDataset(octets=octets, labels=labels, schema=schema,
                          ids=np.arange(n_samples, dtype=np.int64), path=str(path))


# ---------------------------------------------------------------------------
# splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    """Per-class labeled/unlabeled counts and the held-out test fraction."""

    labeled_per_class: int
    unlabeled_per_class: int | None = None  # None = all remaining
    test_fraction: float = 0.2
    seed: int = 0

    def validate(self):
        if self.labeled_per_class < 1:
            raise ConfigError("labeled_per_class must be >= 1")
        if self.unlabeled_per_class is not None and self.unlabeled_per_class < 0:
            raise ConfigError("unlabeled_per_class must be >= 0")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must be in (0, 1)")
        return self


@dataclass
class SamplePool:
    """A subset of a dataset served to training or evaluation."""

    octets: np.ndarray
    labels: np.ndarray   # -1 everywhere for the unlabeled pool
    ids: np.ndarray
    schema: ClassSchema | None
    kind: str            # "labeled" | "unlabeled" | "test"

    @property
    def n(self):
        return self.octets.shape[0]


@dataclass
class Splits:
    labeled: SamplePool
    unlabeled: SamplePool
    test: SamplePool


def make_splits(ds: TrafficDataset, spec: SplitSpec) -> Splits:
    """Stratified test holdout, then labeled/unlabeled pools per class.

    The test split is held out before labeled/unlabeled selection; the
    unlabeled pool is drawn from the per-class remainder with labels erased.
    Identical (ds, spec) always produce identical splits.
    """
    spec.validate()
    if ds.schema is None:
        raise ConfigError("dataset has no class schema; cannot stratify")
    rng = derive_rng(spec.seed, "splits")
    lab_idx, unl_idx, test_idx = [], [], []
    for c, name in enumerate(ds.schema.names):
        members = np.flatnonzero(ds.labels == c)
        order = members[rng.permutation(members.size)]
        n_test = int(members.size * spec.test_fraction + 0.5)
        remainder = members.size - n_test
        want = spec.labeled_per_class + (spec.unlabeled_per_class or 0)
        if remainder < spec.labeled_per_class or \
                (spec.unlabeled_per_class is not None and remainder < want):
            raise CapacityError(
                f"class {name!r} holds {members.size} samples; "
                f"{n_test} reserved for test leaves {remainder}, "
                f"need {want}")
        test_idx.append(order[:n_test])
        order = order[n_test:]
        lab_idx.append(order[:spec.labeled_per_class])
        rest = order[spec.labeled_per_class:]
        if spec.unlabeled_per_class is not None:
            rest = rest[:spec.unlabeled_per_class]
        unl_idx.append(rest)

    def build(idx_list, kind, erase=False):
        idx = np.sort(np.concatenate(idx_list)) if idx_list else np.empty(0, np.int64)
        labels = np.full(idx.size, -1, dtype=np.int32) if erase \
            else ds.labels[idx].copy()
        return SamplePool(octets=ds.octets[idx], labels=labels,
                          ids=ds.ids[idx].copy(), schema=ds.schema, kind=kind)

    return Splits(labeled=build(lab_idx, "labeled"),
                  unlabeled=build(unl_idx, "unlabeled", erase=True),
                  test=build(test_idx, "test"))


def full_pool(ds: TrafficDataset, kind="test", labeled_only=True) -> SamplePool:
    """The whole dataset as one pool (evaluation convenience)."""
    mask = ds.labels >= 0 if labeled_only else np.ones(ds.n, dtype=bool)
    return SamplePool(octets=ds.octets[mask], labels=ds.labels[mask].copy(),
                      ids=ds.ids[mask].copy(), schema=ds.schema, kind=kind)


# ---------------------------------------------------------------------------
# batch streams
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    vectors: np.ndarray  # (B, 1480) normalized floats
    labels: np.ndarray   # (B,) int32, -1 for unlabeled
    kind: str


def batches(pool: SamplePool, batch_size: int, seed: int, epoch: int,
            dtype=np.float32):
    """One epoch of shuffled minibatches over a pool.

    The permutation is keyed by (seed, epoch): every sample appears exactly
    once per epoch and the final short batch is emitted. An empty pool
    yields an empty stream.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    if pool.n == 0:
        return
    rng = derive_rng(seed, "batch-order", epoch)
    order = rng.permutation(pool.n)
    for start in range(0, pool.n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(vectors=pbv.normalize_octets(pool.octets[idx], dtype=dtype),
                    labels=pool.labels[idx], kind=pool.kind)


def cycle_batches(pool: SamplePool, batch_size: int, seed: int, dtype=np.float32):
    """Endless batch stream cycling fresh epochs; reshuffles every pass."""
    if pool.n == 0:
        return
    epoch = 0
    while True:
        yield from batches(pool, batch_size, seed, epoch, dtype=dtype)
        epoch += 1
