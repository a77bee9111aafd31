"""Deterministic derivation of independent random streams from one 64-bit seed.

Every source of randomness in the toolkit flows through these helpers so that
a run is fully reproducible from the seed recorded in its config. Streams for
unrelated roles ("noise", "labeled-order", ...) are decorrelated by hashing
the role label into the seed material.
"""

import hashlib

import numpy as np

_MASK64 = (1 << 64) - 1


def _label_entropy(label: str) -> int:
    digest = hashlib.sha256(label.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def seed_sequence(seed: int, *labels) -> np.random.SeedSequence:
    """SeedSequence keyed by (seed, labels); labels may be str or int."""
    entropy = [int(seed) & _MASK64]
    for label in labels:
        if isinstance(label, str):
            entropy.append(_label_entropy(label))
        else:
            entropy.append(int(label) & _MASK64)
    return np.random.SeedSequence(entropy)


def derive_rng(seed: int, *labels) -> np.random.Generator:
    return np.random.default_rng(seed_sequence(seed, *labels))


def derive_seed(seed: int, *labels) -> int:
    """A plain 64-bit sub-seed, for APIs that take an integer seed."""
    return int(seed_sequence(seed, *labels).generate_state(1, np.uint64)[0])
