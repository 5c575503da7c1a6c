"""End-to-end experiment orchestration: data, split, federated training,
aggregation, streaming inference, metrics, and the JSON report.

Reports are fully resolved and self-contained: re-running the config embedded
in a report reproduces the report byte for byte. Every stage failure is
re-raised as a StageError naming the stage.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .adapter import AdapterParams, adapter_forward, init_adapter
from .client import ClientState, make_client
from .data import (
    STREAM_ADAPTER_INIT,
    EmbeddingDataset,
    FederatedSplit,
    SyntheticConfig,
    build_client_shards,
    generate_synthetic,
    make_split,
    split_unseen_eval,
    stream_order,
)
from .metrics import ConfusionMatrix, aggregate_runs, compute_metrics
from .numerics import RngStream
from .prototyping import InferenceConfig, PrototypeStore, classify_stream, pseudo_predict
from .server import (
    AggregationReport,
    FederatedTrainingResult,
    adaptive_aggregate,
    run_federated_training,
    uniform_aggregate,
)
from .training import TrainConfig

REPORT_FORMAT = "fedovl-report"
CHECKPOINT_FORMAT = "fedovl-checkpoint"
FORMAT_VERSION = 1

SWEEP_AXES = ("shots", "clients", "epsilon_fraction", "alpha")

ADAPTER_INITS = ("glorot", "identity")


class StageError(RuntimeError):
    """An experiment stage failed; .stage names the pipeline step."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}': {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def _stage(name: str):
    try:
        yield
    except StageError:
        raise
    except Exception as e:
        raise StageError(name, e) from e


@dataclass
class DataFiles:
    """Paths of pre-encoded embeddings (images + one-prompt-per-class file)."""

    images: str
    prompts: str


@dataclass
class SplitConfig:
    num_clients: int = 10
    num_unseen: int = 10
    train_shots: int = 10
    val_shots: int = 2
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.num_clients < 1 or self.num_unseen < 2:
            raise ValueError("need >= 1 client and >= 2 unseen classes")
        if self.train_shots < 1 or self.val_shots < 0:
            raise ValueError("train_shots >= 1 and val_shots >= 0 required")
        if not (0.0 < self.val_fraction < 1.0):
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class ExperimentConfig:
    """Everything one experiment needs; unset fields resolve to defaults and
    are echoed back into the report."""

    synthetic: SyntheticConfig | None = field(default_factory=SyntheticConfig)
    files: DataFiles | None = None
    split: SplitConfig = field(default_factory=SplitConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    alpha: float = 1.0
    literal_residual_export: bool = False
    aggregation_temperature: float = 1.0
    adapter_hidden_dim: int | None = None
    adapter_gate: str = "sigmoid"
    adapter_init: str = "glorot"
    no_adaptive_aggregation: bool = False
    no_prototyping: bool = False
    repeats: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.files is None and self.synthetic is None:
            raise ValueError("config needs a data source (synthetic or files)")
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")
        if self.adapter_init not in ADAPTER_INITS:
            raise ValueError(f"adapter_init must be one of {ADAPTER_INITS}")
        if self.aggregation_temperature <= 0:
            raise ValueError("aggregation_temperature must be > 0")

    def to_dict(self) -> dict:
        out = asdict(self)
        if self.files is not None:
            out["synthetic"] = None
        return out

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        raw = dict(raw)
        known = {
            "synthetic", "files", "split", "train", "inference", "alpha",
            "literal_residual_export", "aggregation_temperature",
            "adapter_hidden_dim", "adapter_gate", "adapter_init",
            "no_adaptive_aggregation", "no_prototyping", "repeats", "seed",
        }
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config fields: {sorted(unknown)}")
        files = raw.get("files")
        synthetic = raw.get("synthetic")
        if files is not None:
            files = DataFiles(**files)
            synthetic = None
        elif synthetic is not None or "synthetic" not in raw:
            synthetic = SyntheticConfig(**(synthetic or {}))
        return cls(
            synthetic=synthetic,
            files=files,
            split=SplitConfig(**raw.get("split", {})),
            train=TrainConfig(**raw.get("train", {})),
            inference=InferenceConfig(**raw.get("inference", {})),
            alpha=raw.get("alpha", 1.0),
            literal_residual_export=raw.get("literal_residual_export", False),
            aggregation_temperature=raw.get("aggregation_temperature", 1.0),
            adapter_hidden_dim=raw.get("adapter_hidden_dim"),
            adapter_gate=raw.get("adapter_gate", "sigmoid"),
            adapter_init=raw.get("adapter_init", "glorot"),
            no_adaptive_aggregation=raw.get("no_adaptive_aggregation", False),
            no_prototyping=raw.get("no_prototyping", False),
            repeats=raw.get("repeats", 5),
            seed=raw.get("seed", 0),
        )


def _load_data(cfg: ExperimentConfig, seed: int) -> tuple[EmbeddingDataset, dict[str, np.ndarray]]:
    if cfg.files is not None:
        from .fmeb import read_fmeb

        images = read_fmeb(cfg.files.images)
        prompt_ds = read_fmeb(cfg.files.prompts, expected_dim=images.dim)
        prompts = {prompt_ds.class_names[ci]: vec for ci, vec in prompt_ds.records}
        missing = set(images.class_names) - set(prompts)
        if missing:
            raise ValueError(f"prompt file lacks classes: {sorted(missing)}")
        return images, prompts
    synth = replace(cfg.synthetic, seed=seed)
    return generate_synthetic(synth)


def _initial_adapter(cfg: ExperimentConfig, dim: int, seed: int) -> AdapterParams:
    h = cfg.adapter_hidden_dim or dim
    if cfg.adapter_init == "identity":
        # Saturated gate: W = 0, b2 large, so the gate is exactly 1.0 in
        # float64 and the adapter passes embeddings through untouched.
        return AdapterParams(
            np.zeros((h, dim)), np.zeros(h), np.zeros((dim, h)), np.full(dim, 50.0), cfg.adapter_gate
        )
    return init_adapter(RngStream(seed, STREAM_ADAPTER_INIT), dim, h, cfg.adapter_gate)


def _adapt(adapter: AdapterParams, records: list[tuple[np.ndarray, str]]) -> list[np.ndarray]:
    return [adapter_forward(adapter, z)[1] for z, _ in records]


def _evaluate(
    records: list[tuple[np.ndarray, str]],
    adapter: AdapterParams,
    test_classes: list[str],
    prompts: dict[str, np.ndarray],
    inference: InferenceConfig,
    no_prototyping: bool,
) -> tuple[dict[str, float], dict | None]:
    """Metrics over one ordered evaluation stream, plus the prototype dump."""
    t_test = [prompts[c] for c in test_classes]
    index = {c: i for i, c in enumerate(test_classes)}
    truth = [index[label] for _, label in records]
    adapted = _adapt(adapter, records)
    store_dump = None
    if no_prototyping:
        predictions = [pseudo_predict(z, t_test, inference)[0] for z in adapted]
    else:
        predictions, store = classify_stream(adapted, t_test, inference)
        store_dump = _store_dump(store, test_classes)
    cm = ConfusionMatrix.from_labels(truth, predictions, len(test_classes))
    return compute_metrics(cm), store_dump


def _store_dump(store: PrototypeStore, test_classes: list[str]) -> dict:
    return {
        "samples_seen": store.n,
        "accepted": int(sum(store.counts)),
        "counts": {c: store.counts[i] for i, c in enumerate(test_classes)},
        "centroids": {
            c: (None if store.centroids[i] is None else [float(x) for x in store.centroids[i]])
            for i, c in enumerate(test_classes)
        },
    }


def _aggregation_dump(report: AggregationReport) -> dict:
    return {
        "mode": report.mode,
        "xi": {str(cid): float(v) for cid, v in sorted(report.xi.items())},
        "weights": {str(cid): float(w) for cid, w in sorted(report.weights.items())},
    }


def _build_clients(
    cfg: ExperimentConfig,
    dataset: EmbeddingDataset,
    prompts: dict[str, np.ndarray],
    split: FederatedSplit,
    seed: int,
) -> list[ClientState]:
    train_shards, _ = build_client_shards(dataset, split, seed)
    clients = []
    for cid in sorted(split.client_classes):
        local_prompts = {c: prompts[c] for c in split.client_classes[cid]}
        clients.append(make_client(cid, train_shards[cid], local_prompts, cfg.alpha, seed))
    return clients


def _train_one_seed(
    cfg: ExperimentConfig, seed: int
) -> tuple[EmbeddingDataset, dict[str, np.ndarray], FederatedSplit, FederatedTrainingResult]:
    with _stage("data"):
        dataset, prompts = _load_data(cfg, seed)
    with _stage("split"):
        split = make_split(
            dataset.class_names,
            cfg.split.num_clients,
            cfg.split.num_unseen,
            cfg.split.train_shots,
            cfg.split.val_shots,
            cfg.split.val_fraction,
            seed,
        )
        clients = _build_clients(cfg, dataset, prompts, split, seed)
    with _stage("train"):
        initial = _initial_adapter(cfg, dataset.dim, seed)
        result = run_federated_training(
            clients, cfg.train, initial, scale_export_by_alpha=not cfg.literal_residual_export
        )
    return dataset, prompts, split, result


def run_repeat(cfg: ExperimentConfig, repeat_index: int) -> dict:
    """One full train + aggregate + infer pass at seed base_seed + repeat."""
    seed = cfg.seed + repeat_index
    dataset, prompts, split, result = _train_one_seed(cfg, seed)

    test_classes = sorted(split.unseen_classes)
    t_test = [prompts[c] for c in test_classes]
    with _stage("aggregate"):
        if cfg.no_adaptive_aggregation:
            agg = uniform_aggregate(result.final_updates)
        else:
            agg = adaptive_aggregate(result.final_updates, t_test, cfg.aggregation_temperature)
    with _stage("infer"):
        val_records, test_records = split_unseen_eval(dataset, split, seed)
        test_stream = stream_order(test_records, seed, salt=0)
        val_stream = stream_order(val_records, seed, salt=1)
        test_metrics, store_dump = _evaluate(
            test_stream, agg.aggregated_adapter, test_classes, prompts,
            cfg.inference, cfg.no_prototyping,
        )
        val_metrics, _ = _evaluate(
            val_stream, agg.aggregated_adapter, test_classes, prompts,
            cfg.inference, cfg.no_prototyping,
        )
    return {
        "repeat": repeat_index,
        "seed": seed,
        "test_classes": test_classes,
        "num_test_samples": len(test_records),
        "num_val_samples": len(val_records),
        "metrics": test_metrics,
        "val_metrics": val_metrics,
        "aggregation": _aggregation_dump(agg),
        "loss_traces": {str(s.client_id): [float(x) for x in s.loss_trace] for s in result.states},
        "prototypes": store_dump,
    }


def run_experiment(cfg: ExperimentConfig, progress=None) -> dict:
    """Run cfg.repeats independent repeats and assemble the report."""
    repeats = []
    for r in range(cfg.repeats):
        repeats.append(run_repeat(cfg, r))
        if progress:
            acc = repeats[-1]["metrics"]["accuracy"]
            progress(f"repeat {r + 1}/{cfg.repeats}: test accuracy {acc:.4f}")
    summary = aggregate_runs([r["metrics"] for r in repeats])
    val_summary = aggregate_runs([r["val_metrics"] for r in repeats])
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": "run",
        "config": cfg.to_dict(),
        "repeats": repeats,
        "summary": summary,
        "val_summary": val_summary,
    }


def _apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "shots":
        return replace(cfg, split=replace(cfg.split, train_shots=int(value)))
    if axis == "clients":
        return replace(cfg, split=replace(cfg.split, num_clients=int(value)))
    if axis == "epsilon_fraction":
        return replace(cfg, inference=replace(cfg.inference, epsilon_fraction=float(value)))
    if axis == "alpha":
        return replace(cfg, alpha=float(value))
    raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")


DEFAULT_SWEEP_VALUES = {
    "shots": [2, 4, 8, 16],
    "clients": [5, 10, 20, 30],
    "epsilon_fraction": [0.05, 0.1, 0.2, 0.3, 0.5],
}


def run_sweep(cfg: ExperimentConfig, axis: str, values=None, progress=None) -> dict:
    """One full experiment per axis value (same base seed, so the clients
    sweep re-distributes the same seen classes).

    The alpha axis without explicit values runs a coarse 0.1-resolution grid
    followed by a 0.01-resolution pass around the best coarse point, ranked
    by validation accuracy.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    if axis == "alpha" and values is None:
        return _alpha_search(cfg, progress)
    if values is None:
        values = DEFAULT_SWEEP_VALUES[axis]
    points = []
    for v in values:
        if progress:
            progress(f"sweep {axis}={v}")
        report = run_experiment(_apply_axis(cfg, axis, v), progress)
        points.append({"value": v, "report": report})
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": "sweep",
        "axis": axis,
        "config": cfg.to_dict(),
        "points": points,
    }


def _alpha_search(cfg: ExperimentConfig, progress=None) -> dict:
    coarse = [round(0.1 * i, 1) for i in range(0, 21)]  # 0.0 .. 2.0
    points = []
    best_value, best_acc = None, -1.0
    for v in coarse:
        report = run_experiment(_apply_axis(cfg, "alpha", v), progress)
        acc = report["val_summary"]["accuracy"]["mean"]
        points.append({"value": v, "phase": "coarse", "report": report})
        if acc > best_acc:
            best_value, best_acc = v, acc
        if progress:
            progress(f"alpha {v:.2f}: val accuracy {acc:.4f}")
    fine = [
        round(best_value + 0.01 * i, 2)
        for i in range(-9, 10)
        if i != 0 and best_value + 0.01 * i >= 0.0
    ]
    for v in fine:
        report = run_experiment(_apply_axis(cfg, "alpha", v), progress)
        acc = report["val_summary"]["accuracy"]["mean"]
        points.append({"value": v, "phase": "fine", "report": report})
        if acc > best_acc:
            best_value, best_acc = v, acc
        if progress:
            progress(f"alpha {v:.2f}: val accuracy {acc:.4f}")
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": "sweep",
        "axis": "alpha",
        "config": cfg.to_dict(),
        "points": points,
        "best": {"value": best_value, "val_accuracy_mean": best_acc},
    }


def run_ablation_study(cfg: ExperimentConfig, progress=None) -> dict:
    """The three-way comparison: full protocol, uniform aggregation only,
    and no visual prototyping."""
    variants = {
        "full": replace(cfg, no_adaptive_aggregation=False, no_prototyping=False),
        "no_adaptive_aggregation": replace(cfg, no_adaptive_aggregation=True, no_prototyping=False),
        "no_prototyping": replace(cfg, no_adaptive_aggregation=False, no_prototyping=True),
    }
    reports = {}
    for name, variant in variants.items():
        if progress:
            progress(f"ablation variant: {name}")
        reports[name] = run_experiment(variant, progress)
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": "ablation",
        "config": cfg.to_dict(),
        "variants": reports,
    }


# ---------------------------------------------------------------------------
# Checkpoints: the transferable outcome of training (final per-client
# adapters + perturbed prompt sets), for the split train / infer workflow.
# ---------------------------------------------------------------------------


def _adapter_to_json(a: AdapterParams) -> dict:
    return {
        "w1": a.w1.tolist(),
        "b1": a.b1.tolist(),
        "w2": a.w2.tolist(),
        "b2": a.b2.tolist(),
        "gate_kind": a.gate_kind,
    }


def _adapter_from_json(d: dict) -> AdapterParams:
    return AdapterParams(
        np.array(d["w1"]), np.array(d["b1"]), np.array(d["w2"]), np.array(d["b2"]), d["gate_kind"]
    )


def train_checkpoint(cfg: ExperimentConfig, seed: int | None = None) -> dict:
    """Train one seed and capture exactly what leaves the clients."""
    seed = cfg.seed if seed is None else seed
    _, _, split, result = _train_one_seed(cfg, seed)
    return {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "seed": seed,
        "unseen_classes": sorted(split.unseen_classes),
        "updates": [
            {
                "client_id": u.client_id,
                "adapter": _adapter_to_json(u.adapter_weights),
                "perturbed_prompts": [[float(x) for x in t] for t in u.perturbed_prompts],
            }
            for u in result.final_updates
        ],
        "loss_traces": {str(s.client_id): [float(x) for x in s.loss_trace] for s in result.states},
    }


def infer_from_checkpoint(checkpoint: dict, overrides: dict | None = None) -> dict:
    """Aggregate + streaming inference from a training checkpoint.

    The data and evaluation split are re-derived from the checkpoint's
    embedded config and seed; optional overrides flip inference-stage flags
    (ablations, epsilon, tau) without touching training artifacts.
    """
    from .client import ClientUpdate

    if checkpoint.get("format") != CHECKPOINT_FORMAT:
        raise ValueError("not a checkpoint file")
    cfg = ExperimentConfig.from_dict(checkpoint["config"])
    if overrides:
        cfg = replace(cfg, **overrides)
    seed = checkpoint["seed"]
    with _stage("data"):
        dataset, prompts = _load_data(cfg, seed)
    with _stage("split"):
        split = make_split(
            dataset.class_names,
            cfg.split.num_clients,
            cfg.split.num_unseen,
            cfg.split.train_shots,
            cfg.split.val_shots,
            cfg.split.val_fraction,
            seed,
        )
    updates = [
        ClientUpdate(
            client_id=u["client_id"],
            adapter_weights=_adapter_from_json(u["adapter"]),
            perturbed_prompts=[np.array(t, dtype=np.float64) for t in u["perturbed_prompts"]],
        )
        for u in checkpoint["updates"]
    ]
    test_classes = sorted(split.unseen_classes)
    t_test = [prompts[c] for c in test_classes]
    with _stage("aggregate"):
        if cfg.no_adaptive_aggregation:
            agg = uniform_aggregate(updates)
        else:
            agg = adaptive_aggregate(updates, t_test, cfg.aggregation_temperature)
    with _stage("infer"):
        val_records, test_records = split_unseen_eval(dataset, split, seed)
        test_stream = stream_order(test_records, seed, salt=0)
        val_stream = stream_order(val_records, seed, salt=1)
        test_metrics, store_dump = _evaluate(
            test_stream, agg.aggregated_adapter, test_classes, prompts,
            cfg.inference, cfg.no_prototyping,
        )
        val_metrics, _ = _evaluate(
            val_stream, agg.aggregated_adapter, test_classes, prompts,
            cfg.inference, cfg.no_prototyping,
        )
    repeat = {
        "repeat": 0,
        "seed": seed,
        "test_classes": test_classes,
        "num_test_samples": len(test_records),
        "num_val_samples": len(val_records),
        "metrics": test_metrics,
        "val_metrics": val_metrics,
        "aggregation": _aggregation_dump(agg),
        "loss_traces": checkpoint.get("loss_traces", {}),
        "prototypes": store_dump,
    }
    return {
        "format": REPORT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": "run",
        "config": cfg.to_dict(),
        "repeats": [repeat],
        "summary": aggregate_runs([test_metrics]),
        "val_summary": aggregate_runs([val_metrics]),
    }


def report_to_json(report: dict) -> str:
    """Canonical serialization; identical reports give identical bytes."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
