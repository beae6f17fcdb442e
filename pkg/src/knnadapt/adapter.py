"""Interpolation of the base LM distribution with the retrieval distribution.

Four mixing-weight variants:
  fixed_lambda     one constant in [0, 1]
  single_adaptive  one trainable scalar, squashed by the logistic function
  token_wise       one trainable scalar per vocabulary token, squashed element-wise
  context_aware    token_wise plus a context adjustment W @ (scale * f(x)),
                   clamped to [CLAMP_EPS, 1 - CLAMP_EPS]

Raw parameters are unconstrained reals; temperatures are trained in log space
so the effective temperature stays positive. Gradients are exact analytic
derivatives through the squash, the clamp (zero in the clamped region), the
mixture, the renormalization, and the retrieval softmax.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit, logit  # noqa: F401  (logit re-exported for callers)

from .core import NLL_FLOOR, renormalize
from .datastore import NeighborSet
from .errors import ArityMismatch, MissingContext, MissingW, ZeroMass
from .retrieval import TemperatureSpec, knn_distribution, knn_distribution_grad

INTERP_KINDS = ("fixed_lambda", "single_adaptive", "token_wise", "context_aware")
SCALAR_KINDS = ("fixed_lambda", "single_adaptive")

# Clamp for the context-aware sum; keeps every per-token weight a valid mixture
# while avoiding dead saturation at exactly 0 or 1.
CLAMP_EPS = 1e-4

PARAMS_FORMAT = "knnadapt-params"
PARAMS_VERSION = 1


@dataclass(frozen=True)
class InterpolationSpec:
    """Raw (unconstrained) mixing-weight parameters for one variant."""

    kind: str
    fixed_value: float | None = None
    raw_lambda: float | None = None
    raw_token_lambda: np.ndarray | None = None  # length vocab_size
    raw_context_scale: np.ndarray | None = None  # length d

    def __post_init__(self):
        if self.kind not in INTERP_KINDS:
            raise ValueError(f"unknown interpolation kind {self.kind!r}")
        if self.kind == "fixed_lambda":
            if self.fixed_value is None or not 0.0 <= self.fixed_value <= 1.0:
                raise ArityMismatch("fixed_lambda requires fixed_value in [0, 1]")
        elif self.kind == "single_adaptive":
            if self.raw_lambda is None:
                raise ArityMismatch("single_adaptive requires raw_lambda")
        else:
            if self.raw_token_lambda is None:
                raise ArityMismatch(f"{self.kind} requires raw_token_lambda")
            object.__setattr__(
                self, "raw_token_lambda", np.asarray(self.raw_token_lambda, dtype=np.float64)
            )
            if self.kind == "context_aware":
                if self.raw_context_scale is None:
                    raise ArityMismatch("context_aware requires raw_context_scale")
                object.__setattr__(
                    self, "raw_context_scale", np.asarray(self.raw_context_scale, dtype=np.float64)
                )
            elif self.raw_context_scale is not None:
                raise ArityMismatch("raw_context_scale is only valid for context_aware")


@dataclass(frozen=True)
class TemperatureParams:
    """Raw temperature parameters; effective temperature is exp(raw)."""

    kind: str
    fixed_value: float | None = None  # effective t, fixed kind only
    raw_temp: float | None = None  # single_adaptive
    raw_neighbor_temps: np.ndarray | None = None  # neighbor_wise, length k

    def __post_init__(self):
        if self.kind == "fixed":
            if self.fixed_value is None or self.fixed_value <= 0:
                raise ArityMismatch("fixed temperature requires a positive value")
        elif self.kind == "single_adaptive":
            if self.raw_temp is None:
                raise ArityMismatch("single_adaptive temperature requires raw_temp")
        elif self.kind == "neighbor_wise":
            if self.raw_neighbor_temps is None:
                raise ArityMismatch("neighbor_wise temperature requires raw_neighbor_temps")
            object.__setattr__(
                self,
                "raw_neighbor_temps",
                np.asarray(self.raw_neighbor_temps, dtype=np.float64),
            )
        else:
            raise ValueError(f"unknown temperature kind {self.kind!r}")

    @property
    def trainable(self) -> bool:
        return self.kind != "fixed"

    def spec(self) -> TemperatureSpec:
        """Effective temperatures for the retrieval softmax."""
        if self.kind == "fixed":
            return TemperatureSpec(kind="fixed", value=float(self.fixed_value))
        if self.kind == "single_adaptive":
            return TemperatureSpec(kind="single_adaptive", value=float(np.exp(self.raw_temp)))
        return TemperatureSpec(kind="neighbor_wise", values=np.exp(self.raw_neighbor_temps))


@dataclass(frozen=True)
class AdapterParams:
    """Complete trainable state plus the fixed token-embedding matrix."""

    interp: InterpolationSpec
    temp: TemperatureParams
    k: int
    vocab_size: int
    d: int | None = None
    metric: str | None = None
    token_embeddings: np.ndarray | None = field(default=None, compare=False)  # (V, d), fixed
    init_config: dict | None = None

    def __post_init__(self):
        if self.interp.raw_token_lambda is not None and self.interp.raw_token_lambda.size != self.vocab_size:
            raise ArityMismatch("raw_token_lambda length must equal vocab_size")
        if self.interp.raw_context_scale is not None:
            if self.d is None or self.interp.raw_context_scale.size != self.d:
                raise ArityMismatch("raw_context_scale length must equal d")
        if self.temp.raw_neighbor_temps is not None and self.temp.raw_neighbor_temps.size != self.k:
            raise ArityMismatch("raw_neighbor_temps length must equal k")
        if self.token_embeddings is not None:
            W = np.asarray(self.token_embeddings, dtype=np.float64)
            if W.shape[0] != self.vocab_size or (self.d is not None and W.shape[1] != self.d):
                raise ArityMismatch("token embedding matrix shape must be (vocab_size, d)")
            object.__setattr__(self, "token_embeddings", W)


def fixed_params(
    lam: float, t: float, k: int, vocab_size: int, metric: str | None = None
) -> AdapterParams:
    """Plain retrieval-interpolated LM: constant mixing weight and temperature."""
    return AdapterParams(
        interp=InterpolationSpec(kind="fixed_lambda", fixed_value=float(lam)),
        temp=TemperatureParams(kind="fixed", fixed_value=float(t)),
        k=k,
        vocab_size=vocab_size,
        metric=metric,
    )


def effective_lambda(params: AdapterParams, context_emb: np.ndarray | None = None) -> np.ndarray:
    """Per-token mixing weights actually applied to the retrieval distribution."""
    kind = params.interp.kind
    V = params.vocab_size
    if kind == "fixed_lambda":
        return np.full(V, float(params.interp.fixed_value))
    if kind == "single_adaptive":
        return np.full(V, float(expit(params.interp.raw_lambda)))
    if kind == "token_wise":
        if context_emb is not None:
            raise ArityMismatch("token_wise takes no context embedding")
        return expit(params.interp.raw_token_lambda)
    if context_emb is None:
        raise MissingContext("context_aware interpolation needs the context embedding")
    if params.token_embeddings is None:
        raise MissingW("context_aware interpolation needs the token embedding matrix")
    f_x = np.asarray(context_emb, dtype=np.float64).ravel()
    shift = params.token_embeddings @ (params.interp.raw_context_scale * f_x)
    return np.clip(expit(params.interp.raw_token_lambda) + shift, CLAMP_EPS, 1.0 - CLAMP_EPS)


def interpolate(
    p_lm: np.ndarray,
    p_knn: np.ndarray,
    params: AdapterParams,
    context_emb: np.ndarray | None = None,
) -> np.ndarray:
    """Mix the two distributions in probability space.

    Scalar variants return the mixture directly (it already has unit mass, and
    skipping the division keeps the degenerate weights 0 and 1 bit-exact);
    vector variants renormalize.
    """
    a = np.asarray(p_knn, dtype=np.float64)
    b = np.asarray(p_lm, dtype=np.float64)
    if a.shape != b.shape:
        raise ArityMismatch("distributions must share the vocabulary length")
    kind = params.interp.kind
    if kind in SCALAR_KINDS:
        lam = (
            float(params.interp.fixed_value)
            if kind == "fixed_lambda"
            else float(expit(params.interp.raw_lambda))
        )
        return lam * a + (1.0 - lam) * b
    lam = effective_lambda(params, context_emb)
    mixed = lam * a + (1.0 - lam) * b
    if mixed.sum() <= 0.0:
        raise ZeroMass("both distributions are zero everywhere")
    return renormalize(mixed)


@dataclass
class AdapterGradients:
    """Analytic derivatives of the NLL w.r.t. every raw parameter; None = not present."""

    raw_lambda: float | None = None
    raw_token_lambda: np.ndarray | None = None
    raw_context_scale: np.ndarray | None = None
    raw_temp: float | None = None
    raw_neighbor_temps: np.ndarray | None = None


def forward_loss(
    p_lm: np.ndarray,
    neighbors: NeighborSet,
    params: AdapterParams,
    context_emb: np.ndarray | None,
    gold: int,
) -> float:
    """NLL of the interpolated distribution; the path finite differences probe."""
    p_knn = knn_distribution(neighbors, params.temp.spec(), params.vocab_size)
    ctx = context_emb if params.interp.kind == "context_aware" else None
    p = interpolate(p_lm, p_knn, params, ctx)
    return float(-np.log(max(float(p[gold]), NLL_FLOOR)))


def interpolate_grad(
    p_lm: np.ndarray,
    neighbors: NeighborSet,
    params: AdapterParams,
    context_emb: np.ndarray | None,
    gold: int,
) -> tuple[float, AdapterGradients]:
    """Loss plus exact gradients w.r.t. all raw parameters of ``params``.

    The retrieval distribution is computed here from the neighbor set so the
    chain rule can run through the temperature parameters.
    """
    V = params.vocab_size
    b = np.asarray(p_lm, dtype=np.float64)
    temp_trainable = params.temp.trainable
    if temp_trainable:
        a, jac_t = knn_distribution_grad(neighbors, params.temp.spec(), V)
    else:
        a = knn_distribution(neighbors, params.temp.spec(), V)
        jac_t = None

    kind = params.interp.kind
    grads = AdapterGradients()

    # forward mixture, mirroring interpolate()
    if kind in SCALAR_KINDS:
        lam_s = (
            float(params.interp.fixed_value)
            if kind == "fixed_lambda"
            else float(expit(params.interp.raw_lambda))
        )
        lam = None
        p = lam_s * a + (1.0 - lam_s) * b
        p_g = float(p[gold])
        if p_g < NLL_FLOOR:  # floored: loss is locally constant
            return float(-np.log(NLL_FLOOR)), _zero_like(params, grads)
        loss = float(-np.log(p_g))
        # only the gold entry reaches the loss (no renormalization)
        if kind == "single_adaptive":
            dloss_dlam = -(float(a[gold]) - float(b[gold])) / p_g
            grads.raw_lambda = dloss_dlam * lam_s * (1.0 - lam_s)
        if temp_trainable:
            dloss_da = np.zeros(V)
            dloss_da[gold] = -lam_s / p_g
            _temp_grads(grads, params, jac_t, dloss_da)
        return loss, grads

    ctx = context_emb
    if kind == "context_aware":
        if ctx is None:
            raise MissingContext("context_aware interpolation needs the context embedding")
        if params.token_embeddings is None:
            raise MissingW("context_aware interpolation needs the token embedding matrix")
        f_x = np.asarray(ctx, dtype=np.float64).ravel()
        sig = expit(params.interp.raw_token_lambda)
        pre = sig + params.token_embeddings @ (params.interp.raw_context_scale * f_x)
        lam = np.clip(pre, CLAMP_EPS, 1.0 - CLAMP_EPS)
        clamp_mask = (pre > CLAMP_EPS) & (pre < 1.0 - CLAMP_EPS)
    else:
        sig = expit(params.interp.raw_token_lambda)
        lam = sig
        clamp_mask = None

    s = lam * a + (1.0 - lam) * b
    Z = float(s.sum())
    if Z <= 0.0:
        raise ZeroMass("both distributions are zero everywhere")
    p_g = float(s[gold]) / Z
    if p_g < NLL_FLOOR:
        return float(-np.log(NLL_FLOOR)), _zero_like(params, grads)
    loss = float(-np.log(p_g))

    # dL/ds_v = 1/Z for v != gold, 1/Z - 1/(p_g Z) at gold (renormalized path)
    dloss_ds = np.full(V, 1.0 / Z)
    dloss_ds[gold] -= 1.0 / (p_g * Z)

    dloss_dlam = dloss_ds * (a - b)
    if kind == "context_aware":
        gated = dloss_dlam * clamp_mask
        grads.raw_token_lambda = gated * sig * (1.0 - sig)
        grads.raw_context_scale = (params.token_embeddings.T @ gated) * f_x
    else:
        grads.raw_token_lambda = dloss_dlam * sig * (1.0 - sig)

    if temp_trainable:
        _temp_grads(grads, params, jac_t, dloss_ds * lam)
    return loss, grads


def _temp_grads(grads, params, jac_t, dloss_da):
    """Chain dL/da through the retrieval softmax into raw (log-space) temperatures."""
    dloss_dt = jac_t.T @ dloss_da
    if params.temp.kind == "single_adaptive":
        grads.raw_temp = float(dloss_dt[0]) * float(np.exp(params.temp.raw_temp))
    else:
        grads.raw_neighbor_temps = dloss_dt * np.exp(params.temp.raw_neighbor_temps)


def _zero_like(params: AdapterParams, grads: AdapterGradients) -> AdapterGradients:
    """Exactly-zero gradients with the arity of the trainable parameters."""
    if params.interp.kind == "single_adaptive":
        grads.raw_lambda = 0.0
    elif params.interp.kind in ("token_wise", "context_aware"):
        grads.raw_token_lambda = np.zeros(params.vocab_size)
        if params.interp.kind == "context_aware":
            grads.raw_context_scale = np.zeros(params.d)
    if params.temp.kind == "single_adaptive":
        grads.raw_temp = 0.0
    elif params.temp.kind == "neighbor_wise":
        grads.raw_neighbor_temps = np.zeros(params.k)
    return grads


def save_params(params: AdapterParams, path: str | Path) -> None:
    """Self-describing JSON; floats serialize via repr, so they round-trip exactly."""
    doc = {
        "format": PARAMS_FORMAT,
        "version": PARAMS_VERSION,
        "vocab_size": params.vocab_size,
        "d": params.d,
        "k": params.k,
        "metric": params.metric,
        "interpolation": {
            "kind": params.interp.kind,
            "fixed_value": params.interp.fixed_value,
            "raw_lambda": params.interp.raw_lambda,
            "raw_token_lambda": _arr(params.interp.raw_token_lambda),
            "raw_context_scale": _arr(params.interp.raw_context_scale),
        },
        "temperature": {
            "kind": params.temp.kind,
            "fixed_value": params.temp.fixed_value,
            "raw_temp": params.temp.raw_temp,
            "raw_neighbor_temps": _arr(params.temp.raw_neighbor_temps),
        },
        "init_config": params.init_config,
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def load_params(path: str | Path) -> AdapterParams:
    """Inverse of save_params; the token embedding matrix is supplied separately."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc.get("format") != PARAMS_FORMAT or doc.get("version") != PARAMS_VERSION:
        raise ArityMismatch(f"{path}: not a version-{PARAMS_VERSION} adapter parameter file")
    it = doc["interpolation"]
    tp = doc["temperature"]
    return AdapterParams(
        interp=InterpolationSpec(
            kind=it["kind"],
            fixed_value=it["fixed_value"],
            raw_lambda=it["raw_lambda"],
            raw_token_lambda=_unarr(it["raw_token_lambda"]),
            raw_context_scale=_unarr(it["raw_context_scale"]),
        ),
        temp=TemperatureParams(
            kind=tp["kind"],
            fixed_value=tp["fixed_value"],
            raw_temp=tp["raw_temp"],
            raw_neighbor_temps=_unarr(tp["raw_neighbor_temps"]),
        ),
        k=doc["k"],
        vocab_size=doc["vocab_size"],
        d=doc["d"],
        metric=doc["metric"],
        init_config=doc.get("init_config"),
    )


def _arr(x):
    return None if x is None else [float(v) for v in x]


def _unarr(x):
    return None if x is None else np.asarray(x, dtype=np.float64)
