"""Retrieval distribution: softmax over negative neighbor distances.

Each retrieved neighbor contributes weight exp(-distance / temperature) to its
token; duplicate tokens accumulate. Temperatures are either one shared value or
one value per neighbor rank (rank 0 = nearest).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datastore import NeighborSet
from .errors import TemperatureArityMismatch, TokenOutOfRange

TEMP_KINDS = ("fixed", "single_adaptive", "neighbor_wise")


@dataclass(frozen=True)
class TemperatureSpec:
    """Effective (positive) temperatures to apply to a neighbor set."""

    kind: str
    value: float | None = None  # fixed / single_adaptive
    values: np.ndarray | None = None  # neighbor_wise, one per rank

    def __post_init__(self):
        if self.kind not in TEMP_KINDS:
            raise ValueError(f"unknown temperature kind {self.kind!r}")
        if self.kind == "neighbor_wise":
            if self.values is None:
                raise TemperatureArityMismatch("neighbor_wise requires a temperature vector")
            vals = np.asarray(self.values, dtype=np.float64)
            if vals.ndim != 1 or not np.all(np.isfinite(vals)) or np.any(vals <= 0):
                raise ValueError("neighbor temperatures must be positive and finite")
            object.__setattr__(self, "values", vals)
        else:
            if self.value is None or not np.isfinite(self.value) or self.value <= 0:
                raise ValueError("temperature must be positive and finite")

    def per_neighbor(self, k: int) -> np.ndarray:
        """Expand to one temperature per neighbor rank."""
        if self.kind == "neighbor_wise":
            if self.values.size != k:
                raise TemperatureArityMismatch(
                    f"{self.values.size} temperatures for {k} neighbors"
                )
            return self.values
        return np.full(k, float(self.value))


def _weights(ns: NeighborSet, temps: np.ndarray) -> np.ndarray:
    """Normalized per-neighbor weights; max-shifted so large distances cannot overflow."""
    z = -ns.distances / temps
    w = np.exp(z - z.max())
    return w / w.sum()


def knn_distribution(ns: NeighborSet, temp: TemperatureSpec, vocab_size: int) -> np.ndarray:
    """Dense next-token distribution from a neighbor set; unretrieved tokens get exactly 0."""
    if len(ns) == 0:
        raise ValueError("neighbor set is empty")
    if np.any(ns.tokens < 0) or np.any(ns.tokens >= vocab_size):
        raise TokenOutOfRange("neighbor token outside vocabulary")
    temps = temp.per_neighbor(len(ns))
    r = _weights(ns, temps)
    probs = np.zeros(vocab_size, dtype=np.float64)
    np.add.at(probs, ns.tokens, r)
    return probs


def knn_distribution_grad(
    ns: NeighborSet, temp: TemperatureSpec, vocab_size: int
) -> tuple[np.ndarray, np.ndarray]:
    """Distribution plus its Jacobian w.r.t. the temperature parameters.

    Returns (probs, jac) with jac of shape (vocab_size, p) where p = k for
    neighbor_wise and 1 otherwise (shared-temperature gradients summed over
    neighbors). Derivation: with weight fractions r_j and temperatures t_j,
    d probs[v] / d t_j = r_j * (distance_j / t_j^2) * (1[token_j = v] - probs[v]).
    """
    if len(ns) == 0:
        raise ValueError("neighbor set is empty")
    if np.any(ns.tokens < 0) or np.any(ns.tokens >= vocab_size):
        raise TokenOutOfRange("neighbor token outside vocabulary")
    k = len(ns)
    temps = temp.per_neighbor(k)
    r = _weights(ns, temps)
    probs = np.zeros(vocab_size, dtype=np.float64)
    np.add.at(probs, ns.tokens, r)

    c = r * ns.distances / temps**2  # per-neighbor sensitivity
    jac = -np.outer(probs, c)
    np.add.at(jac, (ns.tokens, np.arange(k)), c)
    if temp.kind != "neighbor_wise":
        jac = jac.sum(axis=1, keepdims=True)
    return probs, jac
