"""Plain SGD on the adapter's NLL, plus the grid-search baseline it is compared to.

Neighbor retrieval never depends on the trainable parameters, so examples are
precomputed once. Training is deterministic given (examples, seed, config):
shuffling uses a seeded generator and batch gradients are reduced in example
order. No momentum, no weight decay, no schedules.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logit

from .adapter import (
    CLAMP_EPS,
    AdapterParams,
    InterpolationSpec,
    TemperatureParams,
    forward_loss,
    interpolate_grad,
)
from .datastore import Datastore, NeighborSet, query_knn
from .errors import ArityMismatch, NonFiniteLoss
from .evaluation import AccessMode, densify_topq
from .retrieval import TemperatureSpec, knn_distribution
from .trace_io import Trace

DEFAULT_LAMBDA_GRID = tuple(i / 20 for i in range(21))  # 0.00, 0.05, ..., 1.00
DEFAULT_TEMP_GRID = (0.5, 1.0, 2.0, 5.0, 10.0)

NLL_FLOOR = 1e-12


@dataclass(frozen=True)
class InitConfig:
    """Effective initialization values; raw parameters start at their inverse squash."""

    lambda_single: float = 0.25
    token_lambda: float = 0.1
    context_token_lambda: float = 0.1
    temperature: float = 1.0
    neighbor_temperature: float = 1.0

    def as_dict(self) -> dict:
        return {
            "lambda_single": self.lambda_single,
            "token_lambda": self.token_lambda,
            "context_token_lambda": self.context_token_lambda,
            "temperature": self.temperature,
            "neighbor_temperature": self.neighbor_temperature,
        }


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.1
    batch_size: int = 128
    max_epochs: int = 5
    plateau_tol: float = 1e-4
    seed: int = 0
    init: InitConfig = field(default_factory=InitConfig)

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")


@dataclass(frozen=True)
class TrainExample:
    """One training event with its neighbors precomputed against the run's datastore."""

    f_x: np.ndarray  # float32
    gold: int
    p_lm: np.ndarray  # dense float64, already reflects the access mode
    neighbors: NeighborSet


@dataclass
class TrainReport:
    variant: tuple[str, str]
    epoch_mean_nll: list[float]
    final_params: AdapterParams
    step_count: int
    wall_time_s: float  # informational; excluded from determinism comparisons


def precompute_examples(
    trace: Trace,
    ds: Datastore,
    k: int,
    mode: AccessMode | None = None,
) -> list[TrainExample]:
    """Retrieve each record's neighbors once and densify its LM distribution."""
    mode = mode or AccessMode.full()
    V = trace.header.vocab_size
    out = []
    for rec in trace.records:
        out.append(
            TrainExample(
                f_x=rec.embedding,
                gold=rec.gold,
                p_lm=densify_topq(rec.probs, mode, V),
                neighbors=query_knn(ds, rec.embedding, k),
            )
        )
    return out


def _squash_init(value: float) -> float:
    # logistic parameterization cannot express exactly 0 or 1
    return float(logit(np.clip(value, CLAMP_EPS, 1.0 - CLAMP_EPS)))


def initial_params(
    variant: tuple[str, str],
    cfg: TrainConfig,
    vocab_size: int,
    k: int,
    d: int | None = None,
    W: np.ndarray | None = None,
    fixed_lambda: float | None = None,
    fixed_t: float | None = None,
    metric: str | None = None,
) -> AdapterParams:
    """Adapter parameters at their configured initialization."""
    interp_kind, temp_kind = variant
    init = cfg.init
    if interp_kind == "fixed_lambda":
        interp = InterpolationSpec(
            kind="fixed_lambda",
            fixed_value=init.lambda_single if fixed_lambda is None else fixed_lambda,
        )
    elif interp_kind == "single_adaptive":
        interp = InterpolationSpec(kind="single_adaptive", raw_lambda=_squash_init(init.lambda_single))
    elif interp_kind == "token_wise":
        interp = InterpolationSpec(
            kind="token_wise",
            raw_token_lambda=np.full(vocab_size, _squash_init(init.token_lambda)),
        )
    elif interp_kind == "context_aware":
        if d is None:
            raise ArityMismatch("context_aware needs the embedding size d")
        interp = InterpolationSpec(
            kind="context_aware",
            raw_token_lambda=np.full(vocab_size, _squash_init(init.context_token_lambda)),
            raw_context_scale=np.zeros(d),
        )
    else:
        raise ArityMismatch(f"unknown interpolation kind {interp_kind!r}")

    if temp_kind == "fixed":
        temp = TemperatureParams(
            kind="fixed", fixed_value=init.temperature if fixed_t is None else fixed_t
        )
    elif temp_kind == "single_adaptive":
        temp = TemperatureParams(kind="single_adaptive", raw_temp=float(np.log(init.temperature)))
    elif temp_kind == "neighbor_wise":
        temp = TemperatureParams(
            kind="neighbor_wise",
            raw_neighbor_temps=np.full(k, float(np.log(init.neighbor_temperature))),
        )
    else:
        raise ArityMismatch(f"unknown temperature kind {temp_kind!r}")

    return AdapterParams(
        interp=interp,
        temp=temp,
        k=k,
        vocab_size=vocab_size,
        d=d,
        metric=metric,
        token_embeddings=W,
        init_config=init.as_dict(),
    )


def _assemble(base: AdapterParams, state: dict) -> AdapterParams:
    interp = base.interp
    if interp.kind == "single_adaptive":
        interp = replace(interp, raw_lambda=state["raw_lambda"])
    elif interp.kind in ("token_wise", "context_aware"):
        interp = replace(interp, raw_token_lambda=state["raw_token_lambda"].copy())
        if interp.kind == "context_aware":
            interp = replace(interp, raw_context_scale=state["raw_context_scale"].copy())
    temp = base.temp
    if temp.kind == "single_adaptive":
        temp = replace(temp, raw_temp=state["raw_temp"])
    elif temp.kind == "neighbor_wise":
        temp = replace(temp, raw_neighbor_temps=state["raw_neighbor_temps"].copy())
    return replace(base, interp=interp, temp=temp)


def sgd_train(
    examples: Sequence[TrainExample],
    variant: tuple[str, str],
    cfg: TrainConfig,
    W: np.ndarray | None = None,
    fixed_lambda: float | None = None,
    fixed_t: float | None = None,
    metric: str | None = None,
) -> TrainReport:
    """Mini-batch SGD on mean NLL with exact analytic gradients."""
    if not examples:
        raise ArityMismatch("no training examples")
    V = examples[0].p_lm.size
    k = len(examples[0].neighbors)
    d = int(examples[0].f_x.size)
    base = initial_params(
        variant, cfg, V, k, d=d, W=W, fixed_lambda=fixed_lambda, fixed_t=fixed_t, metric=metric
    )

    state = {
        "raw_lambda": base.interp.raw_lambda,
        "raw_token_lambda": None
        if base.interp.raw_token_lambda is None
        else base.interp.raw_token_lambda.copy(),
        "raw_context_scale": None
        if base.interp.raw_context_scale is None
        else base.interp.raw_context_scale.copy(),
        "raw_temp": base.temp.raw_temp,
        "raw_neighbor_temps": None
        if base.temp.raw_neighbor_temps is None
        else base.temp.raw_neighbor_temps.copy(),
    }

    rng = np.random.default_rng(cfg.seed)
    n = len(examples)
    epoch_means: list[float] = []
    steps = 0
    t0 = time.perf_counter()

    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(n)
        losses = np.empty(n)
        pos = 0
        for start in range(0, n, cfg.batch_size):
            batch = perm[start : start + cfg.batch_size]
            params = _assemble(base, state)
            acc = {key: None for key in state}
            for idx in batch:
                ex = examples[int(idx)]
                ctx = ex.f_x if variant[0] == "context_aware" else None
                loss, grads = interpolate_grad(ex.p_lm, ex.neighbors, params, ctx, ex.gold)
                if not np.isfinite(loss):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, example {int(idx)}")
                losses[pos] = loss
                pos += 1
                for key in acc:
                    g = getattr(grads, key)
                    if g is None:
                        continue
                    acc[key] = g if acc[key] is None else acc[key] + g
            scale = cfg.learning_rate / len(batch)
            for key, total in acc.items():
                if total is None:
                    continue
                if not np.all(np.isfinite(np.atleast_1d(total))):
                    raise NonFiniteLoss(f"non-finite gradient for {key} at epoch {epoch}")
                state[key] = state[key] - scale * total
            steps += 1
        epoch_mean = float(np.mean(losses))
        epoch_means.append(epoch_mean)
        if epoch > 0:
            prev = epoch_means[-2]
            if (prev - epoch_mean) / max(prev, NLL_FLOOR) < cfg.plateau_tol:
                break

    return TrainReport(
        variant=variant,
        epoch_mean_nll=epoch_means,
        final_params=_assemble(base, state),
        step_count=steps,
        wall_time_s=time.perf_counter() - t0,
    )


def mean_nll(examples: Sequence[TrainExample], params: AdapterParams) -> float:
    """Mean NLL of the adapter on a fixed example set (no parameter updates)."""
    losses = np.empty(len(examples))
    for i, ex in enumerate(examples):
        ctx = ex.f_x if params.interp.kind == "context_aware" else None
        losses[i] = forward_loss(ex.p_lm, ex.neighbors, params, ctx, ex.gold)
    return float(np.mean(losses))


@dataclass(frozen=True)
class GridSearchResult:
    lam: float
    t: float
    nll: float


def grid_search_baseline(
    examples: Sequence[TrainExample],
    lambda_grid: Sequence[float] = DEFAULT_LAMBDA_GRID,
    temp_grid: Sequence[float] = DEFAULT_TEMP_GRID,
) -> GridSearchResult:
    """Exhaustive fixed (lambda, t) search; ties go to smaller lambda, then smaller t.

    Only the gold entries of the two distributions enter the NLL, so they are
    cached per temperature and the lambda scan is a vector operation.
    """
    if not examples or not len(lambda_grid) or not len(temp_grid):
        raise ArityMismatch("grid search needs examples and nonempty grids")
    V = examples[0].p_lm.size
    lm_gold = np.array([ex.p_lm[ex.gold] for ex in examples])
    knn_gold = {}
    for t in sorted(set(float(t) for t in temp_grid)):
        spec = TemperatureSpec(kind="fixed", value=t)
        knn_gold[t] = np.array(
            [knn_distribution(ex.neighbors, spec, V)[ex.gold] for ex in examples]
        )
    best = None
    for lam in sorted(set(float(v) for v in lambda_grid)):
        for t in sorted(knn_gold):
            p_gold = lam * knn_gold[t] + (1.0 - lam) * lm_gold
            nll = float(np.mean(-np.log(np.maximum(p_gold, NLL_FLOOR))))
            if best is None or nll < best.nll:
                best = GridSearchResult(lam=lam, t=t, nll=nll)
    return best


def write_report_csv(report: TrainReport, path: str | Path) -> None:
    """Per-epoch curve: epoch, mean_nll, perplexity."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_nll", "perplexity"])
        for epoch, nll in enumerate(report.epoch_mean_nll):
            writer.writerow([epoch, repr(nll), repr(float(np.exp(nll)))])
