"""Open-vocabulary inference over a stream of adapted embeddings.

Text prototypes are the encoded test prompts. Visual prototypes accumulate
at test time: each sample gets a pseudo label from cosine-to-text softmax,
and if the prediction entropy clears the gate, the unit-normalized embedding
joins that class's running centroid. The emitted answer combines cosine to
the text prototype and to the visual centroid; classes with no visual
prototype yet fall back to a doubled text term so all classes compete on the
same scale.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import as_vector, entropy, l2_normalize, softmax


@dataclass
class InferenceConfig:
    """Knobs of streaming inference.

    The entropy gate threshold is epsilon_fraction times the maximum possible
    entropy ln(num test classes), recomputed per test class set. batch_size 1
    is pure streaming; larger batches answer against the store as of batch
    start and commit updates at batch end.
    """

    tau: float = 0.01
    epsilon_fraction: float = 0.2
    batch_size: int = 1

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if not (0.0 <= self.epsilon_fraction <= 1.0):
            raise ValueError("epsilon_fraction must lie in [0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def epsilon(self, num_classes: int) -> float:
        if num_classes < 2:
            raise ValueError("entropy gate needs at least 2 test classes")
        return self.epsilon_fraction * math.log(num_classes)


@dataclass
class PrototypeStore:
    """Running per-class centroids of accepted unit-normalized embeddings.

    centroids[c] is None until class c accepts its first sample; counts[c]
    tracks accepted samples; n counts every processed sample, accepted or
    not.
    """

    num_classes: int
    centroids: list[np.ndarray | None] = field(default_factory=list)
    counts: list[int] = field(default_factory=list)
    n: int = 0

    @classmethod
    def empty(cls, num_classes: int) -> "PrototypeStore":
        return cls(
            num_classes=num_classes,
            centroids=[None] * num_classes,
            counts=[0] * num_classes,
            n=0,
        )

    def copy(self) -> "PrototypeStore":
        return PrototypeStore(
            num_classes=self.num_classes,
            centroids=[c if c is None else c.copy() for c in self.centroids],
            counts=list(self.counts),
            n=self.n,
        )


def _prototype_matrix(text_prototypes) -> np.ndarray:
    if len(text_prototypes) < 2:
        raise ValueError("need at least 2 test classes")
    mat = np.stack([as_vector(t, "text prototype") for t in text_prototypes])
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        raise ValueError("text prototypes must be nonzero")
    return mat / norms[:, None]


def _cosines(z: np.ndarray, unit_rows: np.ndarray) -> np.ndarray:
    zn = np.linalg.norm(z)
    if zn == 0.0:
        raise ValueError("query embedding must be nonzero")
    return unit_rows @ (z / zn)


def pseudo_predict(
    z_adapted, text_prototypes, cfg: InferenceConfig
) -> tuple[int, np.ndarray]:
    """Cosine-to-text classification: softmax(cos/tau) probabilities and the
    argmax label (ties broken toward the lowest class index). The label is
    taken over the raw cosines, so it is independent of tau."""
    z = as_vector(z_adapted, "z_adapted")
    protos = _prototype_matrix(text_prototypes)
    cos = _cosines(z, protos)
    probabilities = softmax(cos, cfg.tau)
    return int(np.argmax(cos)), probabilities


def gate_and_update(
    store: PrototypeStore,
    z_adapted,
    pseudo_label: int,
    probabilities: np.ndarray,
    cfg: InferenceConfig,
) -> PrototypeStore:
    """Admit the sample into its pseudo class's centroid iff prediction
    entropy clears the gate; the time step advances either way."""
    new = store.copy()
    new.n += 1
    if entropy(probabilities) > cfg.epsilon(store.num_classes):
        return new
    unit = l2_normalize(as_vector(z_adapted, "z_adapted"))
    count = new.counts[pseudo_label]
    old = new.centroids[pseudo_label]
    if old is None:
        new.centroids[pseudo_label] = unit
    else:
        # Incremental mean: recover the sum from the stored centroid, add the
        # new member, divide by the new count.
        new.centroids[pseudo_label] = (old * count + unit) / (count + 1)
    new.counts[pseudo_label] = count + 1
    return new


def combined_score(z_adapted, text_prototypes, store: PrototypeStore) -> np.ndarray:
    """Per-class score cos(z, text_c) + cos(z, centroid_c); the text term is
    doubled where no visual centroid exists yet."""
    z = as_vector(z_adapted, "z_adapted")
    protos = _prototype_matrix(text_prototypes)
    if store.num_classes != protos.shape[0]:
        raise ValueError("store and text prototypes disagree on class count")
    text_cos = _cosines(z, protos)
    scores = np.empty(store.num_classes)
    zn = np.linalg.norm(z)
    for c in range(store.num_classes):
        centroid = store.centroids[c]
        cn = 0.0 if centroid is None else np.linalg.norm(centroid)
        if store.counts[c] > 0 and cn > 0.0:
            scores[c] = text_cos[c] + float(centroid @ z) / (cn * zn)
        else:
            # No usable visual direction (empty class, or members cancelled):
            # double the text term so the class competes on the same scale.
            scores[c] = 2.0 * text_cos[c]
    return scores


def classify_stream(
    samples,
    text_prototypes,
    cfg: InferenceConfig,
    store: PrototypeStore | None = None,
) -> tuple[list[int], PrototypeStore]:
    """Classify adapted embeddings in order, growing visual prototypes as the
    stream progresses.

    Per sample: the emitted answer is the combined-score argmax against the
    store as it stood before the sample; the store update then uses the
    plain cosine-to-text pseudo label, not the emitted answer. With
    batch_size > 1, every answer in a batch reads the store as of batch
    start and the batch's updates commit afterwards, in sample order.
    """
    protos = _prototype_matrix(text_prototypes)
    num_classes = protos.shape[0]
    if store is None:
        store = PrototypeStore.empty(num_classes)
    predictions: list[int] = []
    samples = list(samples)
    for start in range(0, len(samples), cfg.batch_size):
        batch = samples[start : start + cfg.batch_size]
        snapshot = store
        for z in batch:
            scores = combined_score(z, text_prototypes, snapshot)
            predictions.append(int(np.argmax(scores)))
        for z in batch:
            label, probabilities = pseudo_predict(z, text_prototypes, cfg)
            store = gate_and_update(store, z, label, probabilities, cfg)
    return predictions, store
