"""Central server: semantic-closeness scoring of client uploads, adapter
aggregation (similarity-weighted or uniform), and the training-round loop.

During training rounds the server has no test prompts yet, so intermediate
aggregation is uniform; the per-client adapters and perturbed prompt sets
from the final round are kept so inference can aggregate adaptively per new
user.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adapter import AdapterParams
from .client import ClientState, ClientUpdate, local_train, make_update
from .numerics import as_vector, softmax
from .training import TrainConfig


@dataclass
class AggregationReport:
    """Outcome of one aggregation: per-client similarity scores (adaptive mode
    only), the softmax weights actually applied, and the blended adapter."""

    xi: dict[int, float]
    weights: dict[int, float]
    aggregated_adapter: AdapterParams
    mode: str


@dataclass
class FederatedTrainingResult:
    states: list[ClientState]
    final_updates: list[ClientUpdate]
    global_adapter: AdapterParams
    round_reports: list[AggregationReport]


def expected_similarity(t_test: list[np.ndarray], t_client: list[np.ndarray]) -> float:
    """Mean cosine similarity over all (test prompt, client prompt) pairs."""
    if not t_test or not t_client:
        raise ValueError("prompt sets must be nonempty")
    a = np.stack([as_vector(t, "test prompt") for t in t_test])
    b = np.stack([as_vector(t, "client prompt") for t in t_client])
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    a_norms = np.linalg.norm(a, axis=1)
    b_norms = np.linalg.norm(b, axis=1)
    if np.any(a_norms == 0.0) or np.any(b_norms == 0.0):
        raise ValueError("prompt sets must not contain zero vectors")
    sims = (a / a_norms[:, None]) @ (b / b_norms[:, None]).T
    return float(sims.mean())


def _check_compatible(updates: list[ClientUpdate]) -> None:
    if not updates:
        raise ValueError("need at least one client update")
    ref = updates[0].adapter_weights
    for u in updates[1:]:
        a = u.adapter_weights
        if (
            a.w1.shape != ref.w1.shape
            or a.w2.shape != ref.w2.shape
            or a.gate_kind != ref.gate_kind
        ):
            raise ValueError(f"adapter from client {u.client_id} is shape-incompatible")


def _weighted_average(updates: list[ClientUpdate], weights: dict[int, float]) -> AdapterParams:
    # Fixed summation order (by client_id) keeps the reduce bit-reproducible.
    ordered = sorted(updates, key=lambda u: u.client_id)
    ref = ordered[0].adapter_weights
    w1 = np.zeros_like(ref.w1)
    b1 = np.zeros_like(ref.b1)
    w2 = np.zeros_like(ref.w2)
    b2 = np.zeros_like(ref.b2)
    for u in ordered:
        w = weights[u.client_id]
        w1 += w * u.adapter_weights.w1
        b1 += w * u.adapter_weights.b1
        w2 += w * u.adapter_weights.w2
        b2 += w * u.adapter_weights.b2
    return AdapterParams(w1, b1, w2, b2, ref.gate_kind)


def adaptive_aggregate(
    updates: list[ClientUpdate],
    t_test: list[np.ndarray],
    temperature: float = 1.0,
) -> AggregationReport:
    """Blend adapters with softmax weights over each client's expected
    similarity to the new user's test prompts.

    temperature=1 is the canonical rule; other values are diagnostic only.
    """
    _check_compatible(updates)
    ordered = sorted(updates, key=lambda u: u.client_id)
    xi = {u.client_id: expected_similarity(t_test, u.perturbed_prompts) for u in ordered}
    w = softmax(np.array([xi[u.client_id] for u in ordered]), temperature)
    weights = {u.client_id: float(w[i]) for i, u in enumerate(ordered)}
    return AggregationReport(
        xi=xi,
        weights=weights,
        aggregated_adapter=_weighted_average(ordered, weights),
        mode="adaptive",
    )


def uniform_aggregate(updates: list[ClientUpdate]) -> AggregationReport:
    """Parameter-wise mean of the uploaded adapters (equal shard sizes)."""
    _check_compatible(updates)
    weights = {u.client_id: 1.0 / len(updates) for u in updates}
    return AggregationReport(
        xi={},
        weights=weights,
        aggregated_adapter=_weighted_average(updates, weights),
        mode="uniform",
    )


def run_federated_training(
    clients: list[ClientState],
    cfg: TrainConfig,
    initial_adapter: AdapterParams,
    scale_export_by_alpha: bool = True,
) -> FederatedTrainingResult:
    """Run global_epochs rounds of broadcast -> local train -> uniform
    aggregate, retaining the final per-client updates for inference-time
    adaptive aggregation."""
    if not clients:
        raise ValueError("need at least one client")
    states = list(clients)
    global_adapter = initial_adapter.copy()
    round_reports: list[AggregationReport] = []
    updates: list[ClientUpdate] = []
    for _ in range(cfg.global_epochs):
        states = [local_train(s, global_adapter, cfg) for s in states]
        updates = [make_update(s, scale_export_by_alpha) for s in states]
        report = uniform_aggregate(updates)
        round_reports.append(report)
        global_adapter = report.aggregated_adapter
    if not updates:
        # global_epochs == 0: broadcast only, export raw prompt sets.
        states = [local_train(s, global_adapter, TrainConfig(local_epochs=0, global_epochs=0)) for s in states]
        updates = [make_update(s, scale_export_by_alpha) for s in states]
    return FederatedTrainingResult(
        states=states,
        final_updates=updates,
        global_adapter=global_adapter,
        round_reports=round_reports,
    )
