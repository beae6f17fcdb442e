"""Post-hoc analysis of learned per-token mixing weights.

Covers rank correlation of the weights against token frequencies (midrank
Spearman with a large-sample t-approximated p-value) and weight means grouped
by an externally supplied token tag file. Tags are never computed here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .adapter import AdapterParams
from .datastore import Datastore
from .errors import DegenerateInput, TokenOutOfRange


@dataclass(frozen=True)
class FrequencyTable:
    counts: np.ndarray  # nonnegative ints, length vocab
    source: str

    def __post_init__(self):
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.int64))


@dataclass(frozen=True)
class TagMap:
    """One tag string per token id; unlisted ids carry "untagged"."""

    tags: tuple[str, ...]

    @property
    def size(self) -> int:
        return len(self.tags)


def token_frequency(source: Sequence[int] | Datastore, vocab_size: int, label: str = "") -> FrequencyTable:
    """Exact occurrence counts; for a datastore, counts of its value tokens."""
    if isinstance(source, Datastore):
        tokens = source.tokens.astype(np.int64)
        label = label or "datastore"
    else:
        tokens = np.asarray(list(source), dtype=np.int64)
        label = label or "sequence"
    if tokens.size and (tokens.min() < 0 or tokens.max() >= vocab_size):
        raise TokenOutOfRange("token id outside vocabulary")
    counts = np.bincount(tokens, minlength=vocab_size)
    return FrequencyTable(counts=counts, source=label)


def _midranks(values: np.ndarray) -> np.ndarray:
    """Fractional ranks, 1-based; tied values share their average rank."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    n = values.size
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


@dataclass(frozen=True)
class SpearmanResult:
    rho: float
    p_value: float
    underflow: bool  # p underflowed to exactly 0 in double precision


def spearman(xs: Sequence[float], ys: Sequence[float]) -> SpearmanResult:
    """Rank correlation with midrank ties; p-value from the t-approximation (n-2 df)."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 3:
        raise ValueError("spearman needs two equal-length vectors with n >= 3")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise DegenerateInput("rank correlation undefined for a constant input")
    rx = _midranks(x) - (x.size + 1) / 2.0
    ry = _midranks(y) - (y.size + 1) / 2.0
    rho = float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))
    rho = float(np.clip(rho, -1.0, 1.0))
    n = x.size
    if abs(rho) == 1.0:
        p = 0.0
    else:
        t = rho * np.sqrt((n - 2) / (1.0 - rho * rho))
        p = float(2.0 * stats.t.sf(abs(t), df=n - 2))
    return SpearmanResult(rho=rho, p_value=p, underflow=(p == 0.0))


@dataclass(frozen=True)
class TagGroup:
    tag: str
    mean_lambda: float
    count: int
    freq_share: float


@dataclass
class GroupedLambda:
    groups: list[TagGroup]  # retained groups, sorted by tag
    omitted_count: int
    omitted_lambda_sum: float  # enables exact reconstruction of the global mean


def group_lambda(
    lambda_eff: np.ndarray,
    tags: TagMap,
    min_group: int = 10,
    freq: FrequencyTable | None = None,
) -> GroupedLambda:
    """Mean weight per tag; groups smaller than min_group are omitted.

    freq_share is the group's share of occurrences when a frequency table is
    given, otherwise its share of vocabulary entries.
    """
    lam = np.asarray(lambda_eff, dtype=np.float64)
    if lam.size != tags.size:
        raise ValueError("weight vector and tag map lengths differ")
    if np.any(lam < 0) or np.any(lam > 1):
        raise ValueError("effective weights must lie in [0, 1]")
    by_tag: dict[str, list[int]] = {}
    for token_id, tag in enumerate(tags.tags):
        by_tag.setdefault(tag, []).append(token_id)
    share_total = float(freq.counts.sum()) if freq is not None else float(lam.size)
    groups = []
    omitted_count = 0
    omitted_sum = 0.0
    for tag in sorted(by_tag):
        ids = np.asarray(by_tag[tag])
        if ids.size < min_group:
            omitted_count += int(ids.size)
            omitted_sum += float(lam[ids].sum())
            continue
        if freq is not None:
            share = float(freq.counts[ids].sum()) / share_total if share_total > 0 else 0.0
        else:
            share = ids.size / share_total
        groups.append(
            TagGroup(
                tag=tag,
                mean_lambda=float(lam[ids].sum() / ids.size),
                count=int(ids.size),
                freq_share=share,
            )
        )
    return GroupedLambda(groups=groups, omitted_count=omitted_count, omitted_lambda_sum=omitted_sum)


def context_free_lambda(params: AdapterParams) -> np.ndarray:
    """Per-token effective weight with the context term excluded.

    The context adjustment varies per query, so token-level analysis uses only
    the squashed per-token component (a constant vector for scalar variants).
    """
    kind = params.interp.kind
    if kind == "fixed_lambda":
        return np.full(params.vocab_size, float(params.interp.fixed_value))
    if kind == "single_adaptive":
        return np.full(params.vocab_size, float(expit(params.interp.raw_lambda)))
    return expit(params.interp.raw_token_lambda)


def load_tag_file(path: str | Path, vocab_size: int) -> TagMap:
    """Lines of "token_id<TAB>tag"; unlisted ids become "untagged"."""
    tags = ["untagged"] * vocab_size
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        token_id, tag = line.split("\t", 1)
        idx = int(token_id)
        if not 0 <= idx < vocab_size:
            raise TokenOutOfRange(f"tag file id {idx} outside vocabulary")
        tags[idx] = tag.strip()
    return TagMap(tags=tuple(tags))


def load_frequency_file(path: str | Path, vocab_size: int, label: str = "file") -> FrequencyTable:
    """Lines of "token_id<TAB>count"; unlisted ids count zero."""
    counts = np.zeros(vocab_size, dtype=np.int64)
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        token_id, count = line.split("\t", 1)
        idx = int(token_id)
        if not 0 <= idx < vocab_size:
            raise TokenOutOfRange(f"frequency file id {idx} outside vocabulary")
        counts[idx] = int(count)
    return FrequencyTable(counts=counts, source=label)


def save_frequency_file(freq: FrequencyTable, path: str | Path) -> None:
    lines = [f"{i}\t{int(c)}" for i, c in enumerate(freq.counts)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_correlation_csv(rows: Sequence[tuple[str, SpearmanResult | None, str]], path: str | Path) -> None:
    """Rows of (source, result-or-None, error note)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["source", "rho", "p_value", "underflow", "error"])
        for source, res, err in rows:
            if res is None:
                writer.writerow([source, "", "", "", err])
            else:
                writer.writerow([source, repr(res.rho), repr(res.p_value), int(res.underflow), ""])


def write_group_csv(grouped: GroupedLambda, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tag", "mean_lambda", "count", "freq_share"])
        for g in grouped.groups:
            writer.writerow([g.tag, repr(g.mean_lambda), g.count, repr(g.freq_share)])
