"""One federated client: a local embedding shard, local adaptation, and the
update message (adapter weights + label-free perturbed prompts) it uploads.

Residuals live and die on the client; across global rounds only the adapter
is replaced by the broadcast weights.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .adapter import (
    AdapterParams,
    ClientResiduals,
    export_perturbed_prompts,
    init_residuals,
)
from .numerics import RngStream
from .training import AdamWState, TrainConfig, pack_params, train_step

# Stream id offsets: one batch-shuffle stream and one prompt-shuffle stream
# per client, disjoint from the experiment-level streams in experiment.py.
TRAIN_STREAM_BASE = 1_000
EXPORT_STREAM_BASE = 2_000


@dataclass
class ClientState:
    """Everything a client owns. Single-owner: never shared between workers."""

    client_id: int
    shard: list[tuple[np.ndarray, str]]
    local_classes: list[str]
    prompt_embeddings: dict[str, np.ndarray]
    residuals: ClientResiduals
    adapter: AdapterParams | None = None
    optimizer_state: AdamWState | None = None
    train_rng: RngStream | None = None
    export_rng: RngStream | None = None
    loss_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if set(self.prompt_embeddings) != set(self.local_classes):
            raise ValueError("prompt embeddings must cover exactly the local classes")
        for _, label in self.shard:
            if label not in self.prompt_embeddings:
                raise ValueError(f"shard label {label!r} outside local classes")


@dataclass
class ClientUpdate:
    """The message a client uploads: adapter weights and unlabeled perturbed
    prompts. Deliberately has no field that could carry class names or raw
    shard embeddings."""

    client_id: int
    adapter_weights: AdapterParams
    perturbed_prompts: list[np.ndarray]


def make_client(
    client_id: int,
    shard: list[tuple[np.ndarray, str]],
    prompt_embeddings: dict[str, np.ndarray],
    alpha: float,
    seed: int,
) -> ClientState:
    """Assemble a fresh client with zero residuals and its own rng streams."""
    classes = sorted(prompt_embeddings)
    dim = next(iter(prompt_embeddings.values())).shape[0]
    return ClientState(
        client_id=client_id,
        shard=shard,
        local_classes=classes,
        prompt_embeddings=prompt_embeddings,
        residuals=init_residuals(classes, dim, alpha),
        train_rng=RngStream(seed, TRAIN_STREAM_BASE + client_id),
        export_rng=RngStream(seed, EXPORT_STREAM_BASE + client_id),
    )


def _batches(state: ClientState, cfg: TrainConfig) -> list[list[int]]:
    n = len(state.shard)
    if cfg.batch_size is None or cfg.batch_size >= n:
        return [list(range(n))]
    order = state.train_rng.permutation(n) if state.train_rng is not None else np.arange(n)
    return [list(order[i : i + cfg.batch_size]) for i in range(0, n, cfg.batch_size)]


def local_train(state: ClientState, global_adapter: AdapterParams, cfg: TrainConfig) -> ClientState:
    """Run one round of local adaptation starting from the broadcast adapter.

    local_epochs passes over the shard, one loss/gradient/AdamW step per
    batch. Optimizer moments are reset each round unless the config says to
    carry them. Returns a new state; the input state is not mutated.
    """
    if not state.shard:
        raise ValueError(f"client {state.client_id} has an empty shard")
    adapter = global_adapter.copy()
    residuals = state.residuals.copy()
    if cfg.carry_optimizer_state and state.optimizer_state is not None:
        opt_state = state.optimizer_state
    else:
        opt_state = AdamWState.fresh(pack_params(adapter, residuals))
    trace = list(state.loss_trace)

    vectors = np.stack([z for z, _ in state.shard])
    labels = [y for _, y in state.shard]
    for _ in range(cfg.local_epochs):
        for batch in _batches(state, cfg):
            loss, adapter, residuals, opt_state = train_step(
                vectors[batch],
                [labels[i] for i in batch],
                adapter,
                residuals,
                state.prompt_embeddings,
                opt_state,
                cfg,
            )
            trace.append(loss)

    return replace(
        state,
        adapter=adapter,
        residuals=residuals,
        optimizer_state=opt_state,
        loss_trace=trace,
    )


def make_update(state: ClientState, scale_by_alpha: bool = True) -> ClientUpdate:
    """Package the upload: adapter weights plus the seeded-shuffle perturbed
    prompt set. Requires local_train to have run at least once (round 0 with
    zero residuals exports the raw prompts)."""
    if state.adapter is None:
        raise ValueError(f"client {state.client_id} has no adapter to upload")
    if state.export_rng is None:
        raise ValueError(f"client {state.client_id} has no export rng stream")
    prompts = export_perturbed_prompts(
        state.residuals, state.prompt_embeddings, state.export_rng, scale_by_alpha
    )
    return ClientUpdate(
        client_id=state.client_id,
        adapter_weights=state.adapter.copy(),
        perturbed_prompts=prompts,
    )


def prompts_to_dataset(update: ClientUpdate):
    """Shape an update's perturbed prompts as an embedding dataset so they
    travel in the shared binary file format. The single pseudo-class carries
    only the client id, never a class name."""
    from .data import EmbeddingDataset

    if not update.perturbed_prompts:
        raise ValueError("update has no perturbed prompts")
    dim = update.perturbed_prompts[0].shape[0]
    return EmbeddingDataset(
        dim=dim,
        class_names=[f"client_{update.client_id}"],
        records=[(0, vec) for vec in update.perturbed_prompts],
    )


def prompts_from_dataset(dataset) -> list[np.ndarray]:
    """Inverse of prompts_to_dataset (order preserved)."""
    return [vec for _, vec in dataset.records]
