"""Elementary vector math and seeded randomness shared by every module.

All math runs at 64-bit precision on plain numpy arrays. Randomness goes
through :class:`RngStream`, a counter-based Philox generator keyed by
``(seed, stream_id)`` so that the same draw index yields the same value on
every platform. One stream per client / per purpose; never share a stream
between concurrent workers.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "DegenerateInputError",
    "RngStream",
    "as_vector",
    "cosine",
    "entropy",
    "gaussian_draw",
    "l2_normalize",
    "softmax",
]


class DegenerateInputError(ValueError):
    """A zero-norm vector reached an operation that needs a direction."""


def as_vector(v, name: str = "vector") -> np.ndarray:
    """Coerce to a finite 1-D float64 array, rejecting NaN/Inf and empty input."""
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def cosine(a, b) -> float:
    """Cosine similarity dot(a, b) / (|a| * |b|), in [-1, 1].

    Raises DegenerateInputError on zero-norm input; never silently returns 0.
    """
    a = as_vector(a, "a")
    b = as_vector(b, "b")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateInputError("cosine undefined for zero-norm vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def softmax(v, temperature: float = 1.0) -> np.ndarray:
    """Temperature softmax exp(v_i/t) / sum_j exp(v_j/t), max-subtracted for stability."""
    if temperature <= 0.0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    v = as_vector(v, "logits")
    scaled = v / temperature
    scaled -= scaled.max()
    e = np.exp(scaled)
    return e / e.sum()


def entropy(p) -> float:
    """Shannon entropy -sum p_i ln p_i (natural log, 0*ln 0 := 0).

    Input must be a probability vector: nonnegative, summing to 1 within 1e-9.
    """
    p = as_vector(p, "probabilities")
    if np.any(p < 0.0):
        raise ValueError("probabilities must be nonnegative")
    total = p.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"probabilities must sum to 1, got {total!r}")
    nz = p[p > 0.0]
    return float(-np.sum(nz * np.log(nz)))


def l2_normalize(v) -> np.ndarray:
    """Scale v to unit norm, preserving direction."""
    v = as_vector(v)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise DegenerateInputError("cannot normalize zero vector")
    return v / n


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Backed by numpy's counter-based Philox generator, which produces the
    same bit stream on every platform for a given key. Streams are stateful
    over draws; a fresh stream with the same key replays the same sequence.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed < 2**64) or not (0 <= stream_id < 2**64):
            raise ValueError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:  # pragma: no cover
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def child(self, stream_id: int) -> "RngStream":
        """Fresh stream with the same seed and a different stream id."""
        return RngStream(self.seed, stream_id)

    def normal(self, n: int) -> np.ndarray:
        """n i.i.d. standard-normal draws."""
        return self._gen.standard_normal(int(n))

    def integers(self, low: int, high: int, n: int) -> np.ndarray:
        return self._gen.integers(low, high, size=int(n))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(int(n))

    def choice(self, n: int, k: int) -> np.ndarray:
        """k indices from range(n) without replacement."""
        return self._gen.choice(int(n), size=int(k), replace=False)


def gaussian_draw(rng: RngStream, n: int) -> np.ndarray:
    """n i.i.d. standard-normal samples from the given stream."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    return rng.normal(n)
