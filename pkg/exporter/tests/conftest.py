import numpy as np
import pytest

from trace_exporter.model import pretrain


def make_words(n):
    """Distinct pronounceable pseudo-words."""
    cons = "b c d f g l m n p r s t v z".split()
    vows = "a e i o u".split()
    words = []
    for c1 in cons:
        for v1 in vows:
            for c2 in cons:
                words.append(c1 + v1 + c2)
                if len(words) == n:
                    return words
    raise ValueError("not enough syllables")


def domain_corpus(words, n_tokens, seed, core_seed=55, concentration=0.25,
                  boost=6.0, n_hot=8):
    """Word-level chain: shared bigram core, domain-specific hot vocabulary."""
    V = len(words)
    hot = np.random.default_rng((seed, 5)).choice(V, size=n_hot, replace=False)
    boost_vec = np.ones(V)
    boost_vec[hot] = boost
    rows = {}

    def row(prev):
        if prev not in rows:
            r = np.random.default_rng((core_seed, 1, prev)).dirichlet(
                np.full(V, concentration)
            )
            r = r * boost_vec
            rows[prev] = r / r.sum()
        return rows[prev]

    rng = np.random.default_rng((seed, 2))
    seq = [int(rng.integers(0, V))]
    for _ in range(n_tokens - 1):
        seq.append(int(rng.choice(V, p=row(seq[-1]))))
    return " ".join(words[i] for i in seq)


@pytest.fixture(scope="session")
def words():
    return make_words(96)


@pytest.fixture(scope="session")
def corpora(tmp_path_factory, words):
    """Source corpus for pretraining plus target train/validation/test slices."""
    root = tmp_path_factory.mktemp("corpora")
    (root / "source.txt").write_text(domain_corpus(words, 48000, seed=11) + "\n")
    target = domain_corpus(words, 17000, seed=22).split()
    slices = {"train": target[:12000], "validation": target[12000:14500], "test": target[14500:]}
    for name, toks in slices.items():
        (root / f"{name}.txt").write_text(" ".join(toks) + "\n")
    return root


@pytest.fixture(scope="session")
def model_dir(tmp_path_factory, corpora):
    out = tmp_path_factory.mktemp("checkpoint")
    pretrain(corpora / "source.txt", out, epochs=5, seed=0)
    return out


@pytest.fixture(scope="session")
def small_model_dir(tmp_path_factory, words):
    """Minimal checkpoint for fast unit tests."""
    root = tmp_path_factory.mktemp("small")
    text = domain_corpus(words[:24], 3000, seed=7, n_hot=3)
    (root / "mini.txt").write_text(text + "\n")
    out = root / "model"
    pretrain(
        root / "mini.txt", out, d_model=16, n_layers=1, n_heads=2,
        max_context=12, epochs=1, batch_size=32, seed=1,
    )
    return out
