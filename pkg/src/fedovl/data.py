"""Synthetic embedding generation and federated splitting.

The generator stands in for a frozen image/text encoder pair: classes are
random unit directions, and image/prompt embeddings are unit-normalized
noisy copies of the class direction. Splitting assigns seen classes to
clients disjointly and reserves unseen classes for the new user's
validation/test stream.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, l2_normalize

# Stream ids for experiment-level randomness (client streams live in client.py).
STREAM_SYNTHETIC = 1
STREAM_SPLIT = 2
STREAM_SHARDS = 3
STREAM_EVAL_SPLIT = 4
STREAM_ADAPTER_INIT = 5
STREAM_EVAL_ORDER = 6


@dataclass
class SyntheticConfig:
    """Geometry of the synthetic embedding space.

    class_separation scales the class direction against the noise, so
    image = normalize(sep * mu + image_noise * g); 1.0 leaves the noise
    levels as the only difficulty knobs. Defaults are calibrated so plain
    cosine-to-prompt classification lands in the high-but-imperfect regime.
    """

    dim: int = 64
    num_classes: int = 30
    class_separation: float = 1.35
    image_noise: float = 0.3
    text_noise: float = 0.12
    shots_per_class: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("dim must be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.image_noise < 0 or self.text_noise < 0:
            raise ValueError("noise levels must be nonnegative")
        if self.class_separation <= 0:
            raise ValueError("class_separation must be positive")
        if self.shots_per_class < 1:
            raise ValueError("shots_per_class must be >= 1")


@dataclass
class EmbeddingDataset:
    """Embeddings with a class-name table; records are (class index, vector)."""

    dim: int
    class_names: list[str]
    records: list[tuple[int, np.ndarray]]

    def validate(self) -> None:
        if self.dim <= 0:
            raise ValueError("dim must be positive")
        if len(set(self.class_names)) != len(self.class_names):
            raise ValueError("class names must be unique")
        for i, (class_index, vec) in enumerate(self.records):
            if not (0 <= class_index < len(self.class_names)):
                raise ValueError(f"record {i}: class index {class_index} out of range")
            if vec.shape != (self.dim,):
                raise ValueError(f"record {i}: dimension {vec.shape} != ({self.dim},)")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"record {i}: non-finite values")

    def by_class(self) -> dict[str, list[np.ndarray]]:
        out: dict[str, list[np.ndarray]] = {name: [] for name in self.class_names}
        for class_index, vec in self.records:
            out[self.class_names[class_index]].append(vec)
        return out


@dataclass
class FederatedSplit:
    """Disjoint assignment of seen classes to clients plus the unseen pool."""

    client_classes: dict[int, list[str]]
    seen_classes: list[str]
    unseen_classes: list[str]
    train_shots: int = 10
    val_shots: int = 2
    val_fraction: float = 0.2

    def validate(self) -> None:
        claimed: set[str] = set()
        for cid, classes in self.client_classes.items():
            if not classes:
                raise ValueError(f"client {cid} has no classes")
            overlap = claimed & set(classes)
            if overlap:
                raise ValueError(f"classes assigned to multiple clients: {sorted(overlap)}")
            claimed.update(classes)
        if claimed != set(self.seen_classes):
            raise ValueError("client classes must cover exactly the seen classes")
        if set(self.seen_classes) & set(self.unseen_classes):
            raise ValueError("seen and unseen classes must be disjoint")


def generate_synthetic(cfg: SyntheticConfig) -> tuple[EmbeddingDataset, dict[str, np.ndarray]]:
    """Draw the synthetic corpus: per class, a unit mean direction, one prompt
    embedding, and shots_per_class image embeddings, all unit-normalized.

    Deterministic per seed: a fixed draw order (mean, prompt, then shots, per
    class in turn) on one dedicated stream.
    """
    rng = RngStream(cfg.seed, STREAM_SYNTHETIC)
    class_names = [f"class_{i:03d}" for i in range(cfg.num_classes)]
    records: list[tuple[int, np.ndarray]] = []
    prompts: dict[str, np.ndarray] = {}
    for ci, name in enumerate(class_names):
        mean = cfg.class_separation * l2_normalize(rng.normal(cfg.dim))
        prompts[name] = l2_normalize(mean + cfg.text_noise * rng.normal(cfg.dim))
        for _ in range(cfg.shots_per_class):
            records.append((ci, l2_normalize(mean + cfg.image_noise * rng.normal(cfg.dim))))
    dataset = EmbeddingDataset(dim=cfg.dim, class_names=class_names, records=records)
    dataset.validate()
    return dataset, prompts


def prompts_as_dataset(prompts: dict[str, np.ndarray], dim: int) -> EmbeddingDataset:
    """One-record-per-class dataset, the on-disk shape of a prompt table."""
    names = sorted(prompts)
    return EmbeddingDataset(
        dim=dim,
        class_names=names,
        records=[(i, np.asarray(prompts[n], dtype=np.float64)) for i, n in enumerate(names)],
    )


def make_split(
    class_names: list[str],
    num_clients: int,
    num_unseen: int,
    train_shots: int = 10,
    val_shots: int = 2,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> FederatedSplit:
    """Sample unseen classes uniformly, then deal the remaining seen classes
    round-robin over a seeded shuffle into disjoint per-client groups."""
    if num_clients < 1:
        raise ValueError("need at least one client")
    if num_unseen < 2:
        raise ValueError("need at least 2 unseen classes (entropy gate needs >= 2)")
    if len(class_names) - num_unseen < num_clients:
        raise ValueError(
            f"{len(class_names)} classes cannot give {num_unseen} unseen plus "
            f">= 1 seen class per client for {num_clients} clients"
        )
    if not (0.0 < val_fraction < 1.0):
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = RngStream(seed, STREAM_SPLIT)
    unseen_idx = sorted(rng.choice(len(class_names), num_unseen))
    unseen = [class_names[i] for i in unseen_idx]
    seen = [c for c in class_names if c not in set(unseen)]
    order = rng.permutation(len(seen))
    shuffled = [seen[i] for i in order]
    client_classes = {k: shuffled[k::num_clients] for k in range(num_clients)}
    split = FederatedSplit(
        client_classes=client_classes,
        seen_classes=seen,
        unseen_classes=unseen,
        train_shots=train_shots,
        val_shots=val_shots,
        val_fraction=val_fraction,
    )
    split.validate()
    return split


def build_client_shards(
    dataset: EmbeddingDataset, split: FederatedSplit, seed: int
) -> tuple[dict[int, list[tuple[np.ndarray, str]]], dict[int, list[tuple[np.ndarray, str]]]]:
    """Sample each client's train and validation shots without replacement.

    Returns (train_shards, val_shards) keyed by client id; records are
    (embedding, class name) pairs.
    """
    rng = RngStream(seed, STREAM_SHARDS)
    pool = dataset.by_class()
    need = split.train_shots + split.val_shots
    train: dict[int, list[tuple[np.ndarray, str]]] = {}
    val: dict[int, list[tuple[np.ndarray, str]]] = {}
    for cid in sorted(split.client_classes):
        train[cid] = []
        val[cid] = []
        for name in split.client_classes[cid]:
            available = pool[name]
            if len(available) < need:
                raise ValueError(
                    f"class {name!r} has {len(available)} samples, needs {need} "
                    f"({split.train_shots} train + {split.val_shots} val)"
                )
            picks = rng.permutation(len(available))[:need]
            train[cid].extend((available[i], name) for i in picks[: split.train_shots])
            val[cid].extend((available[i], name) for i in picks[split.train_shots :])
    return train, val


def split_unseen_eval(
    dataset: EmbeddingDataset, split: FederatedSplit, seed: int
) -> tuple[list[tuple[np.ndarray, str]], list[tuple[np.ndarray, str]]]:
    """Divide every unseen-class sample into validation and test portions,
    stratified per class at the split's val_fraction."""
    rng = RngStream(seed, STREAM_EVAL_SPLIT)
    pool = dataset.by_class()
    val: list[tuple[np.ndarray, str]] = []
    test: list[tuple[np.ndarray, str]] = []
    for name in sorted(split.unseen_classes):
        samples = pool[name]
        if len(samples) < 2:
            raise ValueError(f"unseen class {name!r} needs at least 2 samples")
        order = rng.permutation(len(samples))
        n_val = max(1, int(len(samples) * split.val_fraction))
        for pos, i in enumerate(order):
            (val if pos < n_val else test).append((samples[i], name))
    return val, test


def stream_order(records: list, seed: int, salt: int = 0) -> list:
    """Seeded shuffle fixing the temporal order of an evaluation stream."""
    rng = RngStream(seed, STREAM_EVAL_ORDER + salt)
    order = rng.permutation(len(records))
    return [records[i] for i in order]
