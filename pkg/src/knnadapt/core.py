"""Shared domain types and elementary distribution arithmetic.

Distributions are plain float64 numpy vectors of length ``vocab_size``.
All probability arithmetic runs in 64-bit even when files store 32-bit,
so gradient checks hold at tight tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IndexOutOfRange, ZeroMass

# Floor applied to p[gold] before the log; keeps limited-access losses finite
# and sits below any probability representable in the 32-bit trace files.
NLL_FLOOR = 1e-12

DIST_SUM_TOL = 1e-9


@dataclass(frozen=True)
class Vocabulary:
    """Dense id <-> string mapping for the token universe."""

    tokens: tuple[str, ...]
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        object.__setattr__(self, "_index", index)

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self._index[token]

    def token_of(self, token_id: int) -> str:
        return self.tokens[token_id]

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(tuple(lines))


@dataclass(frozen=True)
class SparseTopQ:
    """Top-q slice of a next-token distribution, descending by probability."""

    token_ids: np.ndarray  # int64, distinct
    probs: np.ndarray  # float64, descending

    def __post_init__(self):
        ids = np.asarray(self.token_ids, dtype=np.int64)
        ps = np.asarray(self.probs, dtype=np.float64)
        if ids.shape != ps.shape or ids.ndim != 1 or ids.size == 0:
            raise ValueError("top-q entries must be a nonempty parallel pair of 1-d arrays")
        if len(np.unique(ids)) != ids.size:
            raise ValueError("top-q token ids must be distinct")
        if np.any(np.diff(ps) > 0):
            raise ValueError("top-q probabilities must be descending")
        if float(ps.sum()) > 1.0 + 1e-6:
            raise ValueError("top-q probabilities must not sum above one")
        object.__setattr__(self, "token_ids", ids)
        object.__setattr__(self, "probs", ps)

    @property
    def q(self) -> int:
        return int(self.token_ids.size)


def check_distribution(probs: np.ndarray, vocab_size: int | None = None) -> np.ndarray:
    """Validate a dense distribution: finite, nonnegative, unit mass."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("distribution must be a 1-d vector")
    if vocab_size is not None and p.size != vocab_size:
        raise ValueError(f"distribution length {p.size} != vocab size {vocab_size}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError("distribution entries must be finite and nonnegative")
    if abs(float(p.sum()) - 1.0) > DIST_SUM_TOL:
        raise ValueError(f"distribution mass {p.sum()} is not 1 within {DIST_SUM_TOL}")
    return p


def renormalize(scores: np.ndarray) -> np.ndarray:
    """Scale a nonnegative score vector to unit mass."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ZeroMass("scores contain non-finite entries")
    if np.any(s < 0):
        raise ZeroMass("scores contain negative entries")
    total = float(s.sum())
    if total <= 0.0:
        raise ZeroMass("scores sum to zero")
    return s / total


def nll(probs: np.ndarray, gold: int) -> float:
    """Negative log-likelihood of the gold token, in nats, floored at NLL_FLOOR."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= gold < p.size:
        raise IndexOutOfRange(f"gold token {gold} outside vocabulary of {p.size}")
    return float(-np.log(max(float(p[gold]), NLL_FLOOR)))
