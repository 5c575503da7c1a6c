"""Trainable pieces of a client: the gating adapter and per-class residuals.

The adapter is a two-layer network over a frozen visual embedding z. It emits
a per-dimension gate g = G(W2 relu(W1 z + b1) + b2) and the adapted embedding
z' = g * z. Residuals are learnable per-class perturbations delta_c added to
text prompt embeddings, t' = t + alpha * delta_c; they stay on the client and
are never aggregated.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import RngStream, as_vector

GATE_KINDS = ("sigmoid", "softmax")


@dataclass
class AdapterParams:
    """Weights of the two-layer gating adapter.

    w1: (h, d), b1: (h,), w2: (d, h), b2: (d,). The gate nonlinearity is
    elementwise sigmoid by default; "softmax" normalizes the gate across
    dimensions instead.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    gate_kind: str = "sigmoid"

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        h, d = self.w1.shape
        if self.b1.shape != (h,) or self.w2.shape != (d, h) or self.b2.shape != (d,):
            raise ValueError(
                f"inconsistent adapter shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )
        if self.gate_kind not in GATE_KINDS:
            raise ValueError(f"gate_kind must be one of {GATE_KINDS}, got {self.gate_kind!r}")
        for name in ("w1", "b1", "w2", "b2"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"adapter parameter {name} contains non-finite entries")

    @property
    def dim(self) -> int:
        return self.w2.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.w1.shape[0]

    def copy(self) -> "AdapterParams":
        return AdapterParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.gate_kind
        )


@dataclass
class ClientResiduals:
    """Per-class perturbation vectors delta_c plus the shared scale alpha >= 0."""

    deltas: dict[str, np.ndarray]
    alpha: float

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be nonnegative, got {self.alpha}")
        if not self.deltas:
            raise ValueError("residuals need at least one class")
        dims = {v.shape for v in self.deltas.values()}
        if len(dims) != 1 or next(iter(dims)) != (self.dim,):
            raise ValueError("all residual vectors must share one dimension")

    @property
    def dim(self) -> int:
        return next(iter(self.deltas.values())).shape[0]

    def copy(self) -> "ClientResiduals":
        return ClientResiduals({c: d.copy() for c, d in self.deltas.items()}, self.alpha)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gate(v: np.ndarray, kind: str) -> np.ndarray:
    """Apply the gate nonlinearity along the last axis."""
    if kind == "sigmoid":
        return _sigmoid(v)
    shifted = v - v.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def adapter_forward(params: AdapterParams, z) -> tuple[np.ndarray, np.ndarray]:
    """Evaluate the adapter on one embedding: returns (gate, gate * z).

    Runs through the batched path so single and batch evaluation agree
    bitwise."""
    z = as_vector(z, "z")
    if z.shape[0] != params.dim:
        raise ValueError(f"dimension mismatch: z has {z.shape[0]}, adapter expects {params.dim}")
    cache = adapter_forward_batch(params, z[None, :])
    return cache["gate"][0], cache["z_adapted"][0]


def adapter_forward_batch(params: AdapterParams, z_batch: np.ndarray) -> dict[str, np.ndarray]:
    """Vectorized forward over rows of z_batch, keeping the intermediates
    the backward pass needs (see training.loss_backward)."""
    z_batch = np.asarray(z_batch, dtype=np.float64)
    if z_batch.ndim != 2 or z_batch.shape[1] != params.dim:
        raise ValueError(f"expected (N, {params.dim}) batch, got {z_batch.shape}")
    pre_hidden = z_batch @ params.w1.T + params.b1
    hidden = np.maximum(pre_hidden, 0.0)
    pre_gate = hidden @ params.w2.T + params.b2
    gate = _gate(pre_gate, params.gate_kind)
    return {
        "z": z_batch,
        "pre_hidden": pre_hidden,
        "hidden": hidden,
        "gate": gate,
        "z_adapted": gate * z_batch,
    }


def residual_apply(res: ClientResiduals, t, class_label: str) -> np.ndarray:
    """Perturb a prompt embedding: t + alpha * delta_class."""
    t = as_vector(t, "t")
    if class_label not in res.deltas:
        raise KeyError(f"no residual for class {class_label!r}; class information is local")
    delta = res.deltas[class_label]
    if delta.shape != t.shape:
        raise ValueError(f"dimension mismatch: t has {t.shape[0]}, delta has {delta.shape[0]}")
    return t + res.alpha * delta


def export_perturbed_prompts(
    res: ClientResiduals,
    candidate_prompts: dict[str, np.ndarray],
    rng: RngStream,
    scale_by_alpha: bool = True,
) -> list[np.ndarray]:
    """Build the label-free perturbed prompt set a client uploads.

    Emits t_c + alpha * delta_c for every local class (or + delta_c unscaled
    when scale_by_alpha is False), in a seeded-shuffle order so the output
    carries no class ordering. Class labels are intentionally dropped.
    """
    if set(res.deltas) != set(candidate_prompts):
        missing = set(res.deltas) ^ set(candidate_prompts)
        raise ValueError(f"residuals and candidate prompts disagree on classes: {sorted(missing)}")
    scale = res.alpha if scale_by_alpha else 1.0
    ordered = [
        as_vector(candidate_prompts[c], f"prompt[{c}]") + scale * res.deltas[c]
        for c in sorted(candidate_prompts)
    ]
    order = rng.permutation(len(ordered))
    return [ordered[i] for i in order]


def init_adapter(rng: RngStream, d: int, h: int | None = None, gate_kind: str = "sigmoid") -> AdapterParams:
    """Fresh adapter: Glorot-normal weights, zero biases, hidden width h (default d)."""
    if d <= 0:
        raise ValueError("d must be positive")
    h = d if h is None else h
    if h <= 0:
        raise ValueError("h must be positive")
    std = np.sqrt(2.0 / (d + h))
    w1 = rng.normal(h * d).reshape(h, d) * std
    w2 = rng.normal(d * h).reshape(d, h) * std
    return AdapterParams(w1, np.zeros(h), w2, np.zeros(d), gate_kind)


def init_residuals(classes, d: int, alpha: float) -> ClientResiduals:
    """Zero residuals for every class, so training starts from raw prompts."""
    classes = list(classes)
    if not classes:
        raise ValueError("need at least one class")
    if d <= 0:
        raise ValueError("d must be positive")
    return ClientResiduals({c: np.zeros(d) for c in classes}, alpha)
