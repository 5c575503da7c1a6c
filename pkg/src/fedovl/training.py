"""Adaptation loss, its analytic gradients, and the AdamW optimizer.

The loss is a symmetric batch contrastive objective over adapted visual
embeddings and perturbed ground-truth prompts: with s_ij = <z_i, t_j> / tau
(embeddings L2-normalized first unless disabled),

    L = (1/N) sum_i -log softmax_row(s)_ii + (1/N) sum_i -log softmax_col(s)_ii.

Gradients are derived by hand for this fixed graph (adapter gate, residual
add, optional normalization Jacobian, contrastive head) and certified against
central finite differences in the test suite; there is no autodiff here.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .adapter import AdapterParams, ClientResiduals, adapter_forward_batch
from .numerics import DegenerateInputError

DECAYED_KEYS = ("w1", "w2")  # weight decay skips biases and residuals
DELTA_PREFIX = "delta:"


@dataclass
class TrainConfig:
    """Hyperparameters of local adaptation.

    batch_size None means one full-shard batch per step. The loss normalizes
    embeddings and divides by loss_temperature by default; setting
    normalize_before_loss=False with loss_temperature=1 evaluates the raw
    dot-product objective instead.
    """

    learning_rate: float = 1e-5
    local_epochs: int = 2
    global_epochs: int = 2
    batch_size: int | None = None
    loss_temperature: float = 0.07
    normalize_before_loss: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    carry_optimizer_state: bool = False

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.local_epochs < 0 or self.global_epochs < 0:
            raise ValueError("epoch counts must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1 when set")
        if self.loss_temperature <= 0:
            raise ValueError("loss_temperature must be > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ValueError("eps must be > 0 and weight_decay >= 0")


@dataclass
class GradientSet:
    """Gradients shaped exactly like the trainable parameters."""

    d_adapter: dict[str, np.ndarray]
    d_deltas: dict[str, np.ndarray]

    def to_dict(self) -> dict[str, np.ndarray]:
        out = dict(self.d_adapter)
        for label, g in self.d_deltas.items():
            out[DELTA_PREFIX + label] = g
        return out


def pack_params(adapter: AdapterParams, residuals: ClientResiduals) -> dict[str, np.ndarray]:
    params = {
        "w1": adapter.w1.copy(),
        "b1": adapter.b1.copy(),
        "w2": adapter.w2.copy(),
        "b2": adapter.b2.copy(),
    }
    for label, delta in residuals.deltas.items():
        params[DELTA_PREFIX + label] = delta.copy()
    return params


def unpack_params(
    params: dict[str, np.ndarray], gate_kind: str, alpha: float
) -> tuple[AdapterParams, ClientResiduals]:
    adapter = AdapterParams(params["w1"], params["b1"], params["w2"], params["b2"], gate_kind)
    deltas = {
        k[len(DELTA_PREFIX):]: v for k, v in params.items() if k.startswith(DELTA_PREFIX)
    }
    return adapter, ClientResiduals(deltas, alpha)


def _normalize_rows(m: np.ndarray, what: str) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(m, axis=1)
    if np.any(norms == 0.0):
        raise DegenerateInputError(f"zero-norm {what} embedding cannot be normalized")
    return m / norms[:, None], norms


def _contrastive_logits(
    z_rows: np.ndarray, t_rows: np.ndarray, cfg: TrainConfig
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (s, z_hat, t_hat, z_norms, t_norms); norms are all-ones when
    normalization is off."""
    if cfg.normalize_before_loss:
        z_hat, z_norms = _normalize_rows(z_rows, "visual")
        t_hat, t_norms = _normalize_rows(t_rows, "prompt")
    else:
        z_hat, z_norms = z_rows, np.ones(z_rows.shape[0])
        t_hat, t_norms = t_rows, np.ones(t_rows.shape[0])
    s = z_hat @ t_hat.T / cfg.loss_temperature
    return s, z_hat, t_hat, z_norms, t_norms


def _loss_from_logits(s: np.ndarray) -> float:
    n = s.shape[0]
    diag = np.diag(s)
    row_lse = _logsumexp(s, axis=1)
    col_lse = _logsumexp(s, axis=0)
    return float((row_lse - diag).sum() / n + (col_lse - diag).sum() / n)


def _logsumexp(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis)
    shifted = s - np.expand_dims(m, axis)
    return m + np.log(np.exp(shifted).sum(axis=axis))


def _softmax_2d(s: np.ndarray, axis: int) -> np.ndarray:
    m = s.max(axis=axis, keepdims=True)
    e = np.exp(s - m)
    return e / e.sum(axis=axis, keepdims=True)


def adaptation_loss(batch_z_adapted, batch_t_perturbed, cfg: TrainConfig) -> float:
    """Symmetric contrastive loss over paired (adapted image, perturbed prompt)
    batches. Pair i is the ground-truth pair; all other batch rows serve as
    negatives in both directions."""
    z_rows = np.atleast_2d(np.asarray(batch_z_adapted, dtype=np.float64))
    t_rows = np.atleast_2d(np.asarray(batch_t_perturbed, dtype=np.float64))
    if z_rows.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    if z_rows.shape != t_rows.shape:
        raise ValueError(f"batch shape mismatch: {z_rows.shape} vs {t_rows.shape}")
    s, *_ = _contrastive_logits(z_rows, t_rows, cfg)
    return _loss_from_logits(s)


def loss_backward(
    batch_z_raw,
    batch_labels,
    adapter: AdapterParams,
    residuals: ClientResiduals,
    prompt_embeddings: dict[str, np.ndarray],
    cfg: TrainConfig,
) -> tuple[float, GradientSet]:
    """Forward plus exact analytic gradients of the adaptation loss.

    Gradients cover the adapter weights and every residual vector; residuals
    of classes absent from the batch come back zero (their prompts never
    enter the loss).
    """
    z_raw = np.atleast_2d(np.asarray(batch_z_raw, dtype=np.float64))
    labels = list(batch_labels)
    n = z_raw.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    if len(labels) != n:
        raise ValueError("labels must match batch length")
    for y in labels:
        if y not in prompt_embeddings:
            raise KeyError(f"no prompt embedding for class {y!r}")
        if y not in residuals.deltas:
            raise KeyError(f"no residual for class {y!r}")

    cache = adapter_forward_batch(adapter, z_raw)
    z_adapted = cache["z_adapted"]
    t_rows = np.stack(
        [prompt_embeddings[y] + residuals.alpha * residuals.deltas[y] for y in labels]
    )

    s, z_hat, t_hat, z_norms, t_norms = _contrastive_logits(z_adapted, t_rows, cfg)
    loss = _loss_from_logits(s)

    # d loss / d s_ij = (row_softmax + col_softmax - 2I) / N
    ds = (_softmax_2d(s, axis=1) + _softmax_2d(s, axis=0) - 2.0 * np.eye(n)) / n
    dz_hat = ds @ t_hat / cfg.loss_temperature
    dt_hat = ds.T @ z_hat / cfg.loss_temperature

    if cfg.normalize_before_loss:
        # Jacobian of x -> x/|x|: (I - xx^T/|x|^2) / |x|
        dz_adapted = (dz_hat - (dz_hat * z_hat).sum(axis=1, keepdims=True) * z_hat) / z_norms[:, None]
        dt_rows = (dt_hat - (dt_hat * t_hat).sum(axis=1, keepdims=True) * t_hat) / t_norms[:, None]
    else:
        dz_adapted = dz_hat
        dt_rows = dt_hat

    d_adapter = _adapter_backward(adapter, cache, dz_adapted)

    d_deltas = {label: np.zeros(residuals.dim) for label in residuals.deltas}
    for i, y in enumerate(labels):
        d_deltas[y] += residuals.alpha * dt_rows[i]

    return loss, GradientSet(d_adapter, d_deltas)


def _adapter_backward(
    adapter: AdapterParams, cache: dict[str, np.ndarray], dz_adapted: np.ndarray
) -> dict[str, np.ndarray]:
    z, gate, hidden = cache["z"], cache["gate"], cache["hidden"]
    d_gate = dz_adapted * z
    if adapter.gate_kind == "sigmoid":
        d_pre_gate = d_gate * gate * (1.0 - gate)
    else:  # softmax gate over dimensions
        d_pre_gate = gate * (d_gate - (d_gate * gate).sum(axis=1, keepdims=True))
    d_hidden = d_pre_gate @ adapter.w2
    d_pre_hidden = d_hidden * (cache["pre_hidden"] > 0.0)
    return {
        "w1": d_pre_hidden.T @ z,
        "b1": d_pre_hidden.sum(axis=0),
        "w2": d_pre_gate.T @ hidden,
        "b2": d_pre_gate.sum(axis=0),
    }


@dataclass
class AdamWState:
    """First/second moment accumulators plus the step count."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def fresh(cls, params: dict[str, np.ndarray]) -> "AdamWState":
        return cls(
            step=0,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    cfg: TrainConfig,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One AdamW update: bias-corrected moments, decoupled weight decay.

    Decay touches adapter weight matrices only (w1, w2) -- not biases, not
    residuals. Purely functional: inputs are left untouched.
    """
    if set(params) != set(grads) or set(params) != set(state.m):
        raise ValueError("parameter, gradient, and state keys must match")
    t = state.step + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    new_params: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for key, p in params.items():
        g = grads[key]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {key!r}")
        m = cfg.beta1 * state.m[key] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[key] + (1.0 - cfg.beta2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        p_new = p - cfg.learning_rate * update
        if key in DECAYED_KEYS:
            p_new = p_new - cfg.learning_rate * cfg.weight_decay * p
        new_params[key] = p_new
        new_m[key] = m
        new_v[key] = v
    return new_params, AdamWState(step=t, m=new_m, v=new_v)


def train_step(
    z_batch: np.ndarray,
    labels,
    adapter: AdapterParams,
    residuals: ClientResiduals,
    prompt_embeddings: dict[str, np.ndarray],
    opt_state: AdamWState,
    cfg: TrainConfig,
) -> tuple[float, AdapterParams, ClientResiduals, AdamWState]:
    """One optimizer step over a batch; returns the pre-step loss."""
    loss, grads = loss_backward(z_batch, labels, adapter, residuals, prompt_embeddings, cfg)
    params = pack_params(adapter, residuals)
    new_params, new_state = adamw_step(params, grads.to_dict(), opt_state, cfg)
    new_adapter, new_residuals = unpack_params(new_params, adapter.gate_kind, residuals.alpha)
    return loss, new_adapter, new_residuals, new_state
