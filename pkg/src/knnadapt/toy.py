"""Self-contained synthetic universe for end-to-end runs without any real model.

A seeded Markov generator plays the role of a text domain, a smoothed n-gram
model stands in for the black-box LM, and a deterministic hashed feature map
stands in for the context encoder. Domain shift comes from drawing independent
transition tables per generator seed.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import Vocabulary
from .datastore import Datastore, build as build_datastore
from .errors import EmptyContext, EmptyCorpus
from .trace_io import Trace, TraceHeader, TraceRecord

# Recent tokens dominate the context embedding; the window covers 4 tokens.
EMBED_WINDOW_WEIGHTS = (1.0, 0.7, 0.5, 0.35)


@dataclass(frozen=True)
class MarkovSpec:
    """Seeded domain generator; order is the context length of the chain.

    Domain shift has two independent dials. With base_seed set, every row mixes
    base_weight of the base domain's row with (1 - base_weight) of an
    independent draw. With boost_tokens > 0, a fixed random subset of "domain
    tokens" is used boost_factor times more often (rows reweighted and
    renormalized), modelling a domain that talks about the same things but
    leans on its own vocabulary.
    """

    vocab_size: int
    order: int = 2
    concentration: float = 0.3  # smaller draws are peakier
    seed: int = 0
    base_seed: int | None = None
    base_weight: float = 0.0
    boost_tokens: int = 0
    boost_factor: float = 1.0

    def __post_init__(self):
        if self.vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")
        if self.order < 1:
            raise ValueError("order must be at least 1")
        if not 0.0 <= self.base_weight <= 1.0:
            raise ValueError("base_weight must lie in [0, 1]")
        if self.base_weight > 0.0 and self.base_seed is None:
            raise ValueError("base_weight needs a base_seed")
        if not 0 <= self.boost_tokens <= self.vocab_size:
            raise ValueError("boost_tokens must lie in [0, vocab_size]")
        if self.boost_factor <= 0:
            raise ValueError("boost_factor must be positive")

    def boosted_token_ids(self) -> np.ndarray:
        """The domain-token subset whose usage is boosted."""
        if self.boost_tokens == 0:
            return np.empty(0, dtype=np.int64)
        rng = np.random.default_rng((self.seed, 5))
        return np.sort(rng.choice(self.vocab_size, size=self.boost_tokens, replace=False))


def _dirichlet_row(seed: int, context: tuple[int, ...], vocab_size: int, concentration: float) -> np.ndarray:
    rng = np.random.default_rng((seed, 1, *context))
    return rng.dirichlet(np.full(vocab_size, concentration))


class _TransitionTable:
    """Per-context next-token distributions, materialized lazily.

    Each row is seeded by (seed, context), so the table is identical no matter
    in which order contexts are first visited.
    """

    def __init__(self, spec: MarkovSpec):
        self.spec = spec
        self._boost = np.ones(spec.vocab_size)
        self._boost[spec.boosted_token_ids()] = spec.boost_factor
        self._rows: dict[tuple[int, ...], np.ndarray] = {}

    def row(self, context: tuple[int, ...]) -> np.ndarray:
        cached = self._rows.get(context)
        if cached is None:
            spec = self.spec
            cached = _dirichlet_row(spec.seed, context, spec.vocab_size, spec.concentration)
            if spec.base_weight > 0.0:
                base = _dirichlet_row(spec.base_seed, context, spec.vocab_size, spec.concentration)
                cached = spec.base_weight * base + (1.0 - spec.base_weight) * cached
            if spec.boost_tokens > 0:
                cached = cached * self._boost
                cached = cached / cached.sum()
            self._rows[context] = cached
        return cached


def generate_corpus(spec: MarkovSpec, length: int) -> np.ndarray:
    """Sample a token sequence of exactly ``length`` tokens, deterministically."""
    if length < spec.order:
        raise ValueError("length must be at least the generator order")
    table = _TransitionTable(spec)
    rng = np.random.default_rng((spec.seed, 2))
    seq = list(rng.integers(0, spec.vocab_size, size=spec.order))
    while len(seq) < length:
        ctx = tuple(int(t) for t in seq[-spec.order :])
        seq.append(int(rng.choice(spec.vocab_size, p=table.row(ctx))))
    return np.asarray(seq[:length], dtype=np.int64)


@dataclass
class ToyLM:
    """Add-alpha smoothed n-gram model with backoff to shorter contexts.

    p(y | ctx) = (count(ctx, y) + alpha) / (count(ctx) + alpha * vocab);
    an unseen context falls back to the next shorter table, ending at the
    add-alpha unigram.
    """

    order: int
    alpha: float
    vocab_size: int
    tables: list[dict[tuple[int, ...], np.ndarray]] = field(repr=False)

    def next_distribution(self, context) -> np.ndarray:
        ctx_list = [int(t) for t in context]
        for m in range(self.order, 0, -1):
            c = m - 1
            if len(ctx_list) < c:
                continue
            ctx = tuple(ctx_list[len(ctx_list) - c :]) if c else ()
            counts = self.tables[m - 1].get(ctx)
            if counts is not None:
                return (counts + self.alpha) / (counts.sum() + self.alpha * self.vocab_size)
        # reachable only for an empty unigram table, which fit_ngram forbids
        return np.full(self.vocab_size, 1.0 / self.vocab_size)


def fit_ngram(corpus, order: int, alpha: float, vocab_size: int) -> ToyLM:
    """Count tables for every order from unigram up to ``order``."""
    tokens = np.asarray(corpus, dtype=np.int64)
    if tokens.size == 0:
        raise EmptyCorpus("cannot fit on an empty corpus")
    if tokens.size <= order - 1:
        raise EmptyCorpus("corpus shorter than the model context")
    tables: list[dict[tuple[int, ...], np.ndarray]] = []
    for m in range(1, order + 1):
        c = m - 1
        table: dict[tuple[int, ...], np.ndarray] = {}
        for i in range(c, tokens.size):
            ctx = tuple(int(t) for t in tokens[i - c : i])
            row = table.get(ctx)
            if row is None:
                row = np.zeros(vocab_size, dtype=np.float64)
                table[ctx] = row
            row[tokens[i]] += 1.0
        tables.append(table)
    return ToyLM(order=order, alpha=alpha, vocab_size=vocab_size, tables=tables)


def _hash_feature(seed: int, position: int, token: int, d: int) -> tuple[int, float]:
    digest = hashlib.blake2b(
        struct.pack("<qqq", seed, position, token), digest_size=8
    ).digest()
    value = int.from_bytes(digest, "little")
    sign = 1.0 if value & 1 else -1.0
    return (value >> 1) % d, sign


def embed_context(context, d: int, seed: int = 0) -> np.ndarray:
    """Deterministic hashed features of the last 4 tokens, L2-normalized.

    Each window token adds a position-weighted signed unit at a position-salted
    hashed coordinate; nearer tokens carry larger weights.
    """
    ctx = [int(t) for t in context]
    if not ctx:
        raise EmptyContext("cannot embed an empty context")
    if d < 8:
        raise ValueError("embedding size must be at least 8")
    vec = np.zeros(d, dtype=np.float64)
    window = ctx[-len(EMBED_WINDOW_WEIGHTS) :]
    for position, token in enumerate(reversed(window)):
        coord, sign = _hash_feature(seed, position, token, d)
        vec[coord] += sign * EMBED_WINDOW_WEIGHTS[position]
    norm = float(np.linalg.norm(vec))
    return vec / norm


def token_embedding_matrix(vocab_size: int, d: int, seed: int = 0) -> np.ndarray:
    """Encoder applied to every single-token sequence: the fixed matrix W."""
    return np.stack([embed_context([v], d, seed) for v in range(vocab_size)])


@dataclass(frozen=True)
class FixtureSizes:
    source_len: int = 30000
    datastore: int = 20000
    val: int = 2000
    test: int = 2000


# Seeds and shapes pinned for reproducible end-to-end runs. Source and target
# share one structural core (base_seed 100) and differ in which token subset
# runs hot, so the base LM is informative on the target but clearly beatable
# with target-domain retrieval, and the advantage is token-dependent.
DEFAULT_SOURCE_SPEC = MarkovSpec(
    vocab_size=64, order=1, concentration=0.25, seed=101,
    base_seed=100, base_weight=1.0, boost_tokens=8, boost_factor=6.0,
)
DEFAULT_TARGET_SPEC = MarkovSpec(
    vocab_size=64, order=1, concentration=0.25, seed=202,
    base_seed=100, base_weight=1.0, boost_tokens=8, boost_factor=6.0,
)
DEFAULT_SIZES = FixtureSizes()
DEFAULT_D = 32
DEFAULT_K = 32
DEFAULT_EMBED_SEED = 7
DEFAULT_NGRAM_ORDER = 2
DEFAULT_ALPHA = 1.0


@dataclass
class ToyFixture:
    lm: ToyLM
    datastore: Datastore
    val_trace: Trace
    test_trace: Trace
    vocab: Vocabulary
    W: np.ndarray  # (vocab, d) float32
    source_spec: MarkovSpec
    target_spec: MarkovSpec
    sizes: FixtureSizes
    d: int
    k: int
    embed_seed: int
    ngram_order: int
    alpha: float


def build_fixture(
    source_spec: MarkovSpec = DEFAULT_SOURCE_SPEC,
    target_spec: MarkovSpec = DEFAULT_TARGET_SPEC,
    sizes: FixtureSizes = DEFAULT_SIZES,
    d: int = DEFAULT_D,
    k: int = DEFAULT_K,
    embed_seed: int = DEFAULT_EMBED_SEED,
    ngram_order: int = DEFAULT_NGRAM_ORDER,
    alpha: float = DEFAULT_ALPHA,
    metric: str = "squared_l2",
) -> ToyFixture:
    """End-to-end fixture: source-domain LM, target datastore, target traces.

    The base LM is fit on the source domain; the datastore and both traces come
    from disjoint segments of one target-domain stream.
    """
    if source_spec.vocab_size != target_spec.vocab_size:
        raise ValueError("source and target must share a vocabulary")
    V = target_spec.vocab_size
    lm = fit_ngram(generate_corpus(source_spec, sizes.source_len), ngram_order, alpha, V)

    warmup = max(4, target_spec.order)
    total = warmup + sizes.datastore + sizes.val + sizes.test
    stream = generate_corpus(target_spec, total)

    def embed_at(i: int) -> np.ndarray:
        return embed_context(stream[max(0, i - 4) : i], d, embed_seed).astype(np.float32)

    ds_start = warmup
    val_start = ds_start + sizes.datastore
    test_start = val_start + sizes.val

    records = [(embed_at(i), int(stream[i])) for i in range(ds_start, val_start)]
    ds = build_datastore(records, metric=metric)

    def make_trace(start: int, count: int) -> Trace:
        recs = []
        for i in range(start, start + count):
            context = stream[max(0, i - 8) : i]
            recs.append(
                TraceRecord(
                    embedding=embed_at(i),
                    gold=int(stream[i]),
                    probs=lm.next_distribution(context),
                    context=tuple(int(t) for t in context),
                )
            )
        header = TraceHeader(vocab_size=V, d=d, mode="full", q=0, count=count)
        return Trace(header=header, records=recs)

    return ToyFixture(
        lm=lm,
        datastore=ds,
        val_trace=make_trace(val_start, sizes.val),
        test_trace=make_trace(test_start, sizes.test),
        vocab=Vocabulary(tuple(f"tok{i:04d}" for i in range(V))),
        W=token_embedding_matrix(V, d, embed_seed).astype(np.float32),
        source_spec=source_spec,
        target_spec=target_spec,
        sizes=sizes,
        d=d,
        k=k,
        embed_seed=embed_seed,
        ngram_order=ngram_order,
        alpha=alpha,
    )
