"""Perplexity evaluation, including restricted top-q access and datastore grids.

NLL is accumulated in nats; perplexity = exp(mean NLL). Under top-q access the
q most probable LM tokens keep their probability and every unavailable token
receives the leftover mass spread uniformly: (1 - sum_q) / (vocab - q).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .adapter import AdapterParams, interpolate
from .core import SparseTopQ, nll
from .datastore import Datastore, NeighborSet, query_knn
from .errors import ArityMismatch, MassExceedsOne
from .retrieval import knn_distribution
from .trace_io import Trace


@dataclass(frozen=True)
class AccessMode:
    kind: str  # "full" | "top_q"
    q: int = 0

    def __post_init__(self):
        if self.kind not in ("full", "top_q"):
            raise ValueError(f"unknown access kind {self.kind!r}")
        if self.kind == "top_q" and self.q < 1:
            raise ValueError("top_q access requires q >= 1")

    @classmethod
    def full(cls) -> "AccessMode":
        return cls(kind="full")

    @classmethod
    def top(cls, q: int) -> "AccessMode":
        return cls(kind="top_q", q=q)

    def __str__(self) -> str:
        return "full" if self.kind == "full" else f"top-{self.q}"


@dataclass(frozen=True)
class EvalResult:
    label: str
    perplexity: float
    token_count: int
    mean_nll: float


def densify_topq(
    p_lm: np.ndarray | SparseTopQ, mode: AccessMode, vocab_size: int
) -> np.ndarray:
    """Dense LM distribution as seen under the given access mode."""
    if mode.kind == "full":
        if isinstance(p_lm, SparseTopQ):
            raise ArityMismatch("full access cannot be reconstructed from a top-q record")
        return np.asarray(p_lm, dtype=np.float64)
    q = mode.q
    if q >= vocab_size:
        raise ArityMismatch(f"top_q access requires q < vocab size, got q={q}")
    if isinstance(p_lm, SparseTopQ):
        if q > p_lm.q:
            raise ArityMismatch(f"record stores top-{p_lm.q}, cannot widen to top-{q}")
        ids = p_lm.token_ids[:q]
        kept = p_lm.probs[:q]
    else:
        p = np.asarray(p_lm, dtype=np.float64)
        # largest first; ties broken by lower token id
        order = np.lexsort((np.arange(p.size), -p))[:q]
        ids = order
        kept = p[order]
    total = float(kept.sum())
    if total > 1.0 + 1e-6:
        raise MassExceedsOne(f"top-{q} probabilities sum to {total}")
    fill = max((1.0 - total) / (vocab_size - q), 0.0)
    out = np.full(vocab_size, fill)
    out[ids] = kept
    return out


def perplexity(
    trace: Trace,
    datastore: Datastore | None = None,
    params: AdapterParams | None = None,
    mode: AccessMode | None = None,
    label: str | None = None,
    neighbors: Sequence[NeighborSet] | None = None,
) -> EvalResult:
    """Mean NLL and perplexity of one model over one trace.

    params=None evaluates the plain LM (datastore ignored). With params, the
    retrieval distribution comes from the datastore (or precomputed neighbor
    sets) and is interpolated per record. Fixed lambda and t reproduce the
    untrained retrieval-interpolated baseline.
    """
    mode = mode or AccessMode.full()
    V = trace.header.vocab_size
    if params is not None and datastore is None and neighbors is None:
        raise ArityMismatch("retrieval-based evaluation needs a datastore or neighbor sets")
    if label is None:
        label = "standard" if params is None else f"{params.interp.kind}/{params.temp.kind}"
    losses = np.empty(len(trace.records))
    for i, rec in enumerate(trace.records):
        p_lm = densify_topq(rec.probs, mode, V)
        if params is None:
            losses[i] = nll(p_lm, rec.gold)
            continue
        ns = neighbors[i] if neighbors is not None else query_knn(datastore, rec.embedding, params.k)
        p_knn = knn_distribution(ns, params.temp.spec(), V)
        ctx = rec.embedding if params.interp.kind == "context_aware" else None
        losses[i] = nll(interpolate(p_lm, p_knn, params, ctx), rec.gold)
    mean = float(np.mean(losses))  # numpy pairwise summation, fixed order
    return EvalResult(
        label=label, perplexity=float(np.exp(mean)), token_count=len(trace.records), mean_nll=mean
    )


@dataclass(frozen=True)
class MatrixRow:
    model: str
    datastore: str
    access_mode: str
    tokens: int
    mean_nll: float
    perplexity: float


def run_matrix(
    traces: Sequence[tuple[str, Trace]],
    datastores: Sequence[tuple[str, Datastore]],
    variants: Sequence[tuple[str, AdapterParams | None]],
    modes: Sequence[AccessMode],
) -> list[MatrixRow]:
    """Cartesian evaluation grid, one row per cell.

    Retrieval-free variants produce a single row per (trace, mode); retrieval
    variants produce one row per datastore. Neighbor sets are cached per
    (trace, datastore, k) since they do not depend on mode or parameters.
    """
    rows: list[MatrixRow] = []
    neighbor_cache: dict[tuple[str, str, int], list[NeighborSet]] = {}
    for trace_label, trace in traces:
        for mode in modes:
            for variant_label, params in variants:
                if params is None:
                    res = perplexity(trace, mode=mode, label=variant_label)
                    rows.append(
                        MatrixRow(
                            model=variant_label, datastore="", access_mode=str(mode),
                            tokens=res.token_count, mean_nll=res.mean_nll,
                            perplexity=res.perplexity,
                        )
                    )
                    continue
                for ds_label, ds in datastores:
                    key = (trace_label, ds_label, params.k)
                    if key not in neighbor_cache:
                        neighbor_cache[key] = [
                            query_knn(ds, rec.embedding, params.k) for rec in trace.records
                        ]
                    res = perplexity(
                        trace, ds, params, mode, label=variant_label,
                        neighbors=neighbor_cache[key],
                    )
                    rows.append(
                        MatrixRow(
                            model=variant_label, datastore=ds_label, access_mode=str(mode),
                            tokens=res.token_count, mean_nll=res.mean_nll,
                            perplexity=res.perplexity,
                        )
                    )
    return rows


def matrix_to_csv(rows: Sequence[MatrixRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "datastore", "access_mode", "tokens", "mean_nll", "perplexity"])
        for row in rows:
            writer.writerow(
                [row.model, row.datastore, row.access_mode, row.tokens,
                 repr(row.mean_nll), repr(row.perplexity)]
            )


def matrix_table(rows: Sequence[MatrixRow]) -> str:
    """Aligned text table of the evaluation grid."""
    headers = ["model", "datastore", "access", "tokens", "mean_nll", "ppl"]
    cells = [
        [r.model, r.datastore or "-", r.access_mode, str(r.tokens),
         f"{r.mean_nll:.4f}", f"{r.perplexity:.2f}"]
        for r in rows
    ]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for c in cells:
        lines.append("  ".join(v.ljust(w) for v, w in zip(c, widths)))
    return "\n".join(lines)
