import numpy as np
import pytest
from scipy import stats

from knnadapt.adapter import AdapterParams, InterpolationSpec, TemperatureParams, fixed_params
from knnadapt.analysis import (
    FrequencyTable,
    TagMap,
    context_free_lambda,
    group_lambda,
    load_frequency_file,
    load_tag_file,
    save_frequency_file,
    spearman,
    token_frequency,
)
from knnadapt.errors import DegenerateInput, TokenOutOfRange


def exact_spearman(xs, ys):
    """O(n^2) midrank oracle: count-based ranks, direct Pearson."""
    def midranks(v):
        v = np.asarray(v, dtype=float)
        out = np.empty(v.size)
        for i, x in enumerate(v):
            less = np.sum(v < x)
            equal = np.sum(v == x)
            out[i] = less + (equal + 1) / 2.0
        return out

    rx, ry = midranks(xs), midranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.dot(rx, ry) / np.sqrt(np.dot(rx, rx) * np.dot(ry, ry)))


class TestTokenFrequency:
    def test_sequence_counts(self):
        ft = token_frequency([0, 0, 1], vocab_size=4)
        assert list(ft.counts) == [2, 1, 0, 0]

    def test_empty(self):
        ft = token_frequency([], vocab_size=3)
        assert list(ft.counts) == [0, 0, 0]

    def test_fixture_mass(self, fixture):
        ft = token_frequency(fixture.datastore, vocab_size=64)
        assert ft.counts.sum() == 20000
        assert ft.source == "datastore"

    def test_out_of_range(self):
        with pytest.raises(TokenOutOfRange):
            token_frequency([5], vocab_size=4)


class TestSpearman:
    def test_perfect_monotone(self):
        assert spearman([1, 2, 3], [1, 2, 3]).rho == pytest.approx(1.0, abs=1e-15)

    def test_perfect_inverse(self):
        assert spearman([1, 2, 3], [3, 2, 1]).rho == pytest.approx(-1.0, abs=1e-15)

    def test_tied_case_matches_oracle(self):
        xs = [1.0, 2.0, 2.0, 4.0]
        ys = [1.0, 3.0, 2.0, 4.0]
        assert abs(spearman(xs, ys).rho - exact_spearman(xs, ys)) <= 1e-12

    def test_random_ties_match_oracle(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            n = int(rng.integers(3, 40))
            xs = rng.integers(0, 6, size=n).astype(float)
            ys = rng.integers(0, 6, size=n).astype(float)
            if np.all(xs == xs[0]) or np.all(ys == ys[0]):
                continue
            assert abs(spearman(xs, ys).rho - exact_spearman(xs, ys)) <= 1e-12

    def test_symmetry_and_sign_flip(self):
        rng = np.random.default_rng(22)
        xs = rng.normal(size=30)
        ys = rng.normal(size=30)
        assert spearman(xs, ys).rho == pytest.approx(spearman(ys, xs).rho, abs=1e-15)
        assert spearman(xs, -ys).rho == pytest.approx(-spearman(xs, ys).rho, abs=1e-15)

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(23)
        xs = rng.normal(size=25)
        ys = rng.normal(size=25)
        base = spearman(xs, ys).rho
        assert spearman(np.exp(xs), ys).rho == pytest.approx(base, abs=1e-12)

    def test_p_value_matches_reference(self):
        rng = np.random.default_rng(24)
        xs = rng.normal(size=40)
        ys = xs + rng.normal(size=40) * 2
        ours = spearman(xs, ys)
        ref_rho, ref_p = stats.spearmanr(xs, ys)
        assert ours.rho == pytest.approx(ref_rho, abs=1e-12)
        assert ours.p_value == pytest.approx(ref_p, rel=1e-8)

    def test_underflow_flag(self):
        res = spearman([1, 2, 3, 4], [1, 2, 3, 4])
        assert res.p_value == 0.0 and res.underflow

    def test_degenerate(self):
        with pytest.raises(DegenerateInput):
            spearman([1, 1, 1], [1, 2, 3])
        with pytest.raises(DegenerateInput):
            spearman([1, 2, 3], [5, 5, 5])

    def test_needs_three(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2])


class TestGroupLambda:
    def test_single_group(self):
        lam = np.array([0.1, 0.2, 0.3])
        grouped = group_lambda(lam, TagMap(("x", "x", "x")), min_group=1)
        assert len(grouped.groups) == 1
        assert grouped.groups[0].mean_lambda == pytest.approx(0.2, abs=1e-15)
        assert grouped.groups[0].count == 3

    def test_small_group_omitted(self):
        tags = tuple(["big"] * 10 + ["small"] * 9)
        lam = np.linspace(0.1, 0.9, 19)
        grouped = group_lambda(lam, TagMap(tags), min_group=10)
        assert [g.tag for g in grouped.groups] == ["big"]
        assert grouped.omitted_count == 9

    def test_hand_means(self):
        lam = np.array([0.1, 0.3, 0.2])
        grouped = group_lambda(lam, TagMap(("a", "a", "b")), min_group=1)
        means = {g.tag: g.mean_lambda for g in grouped.groups}
        assert means["a"] == pytest.approx(0.2, abs=1e-15)
        assert means["b"] == pytest.approx(0.2, abs=1e-15)

    def test_weighted_reconstruction(self):
        rng = np.random.default_rng(25)
        V = 200
        lam = rng.uniform(0, 1, size=V)
        tags = tuple(rng.choice(["a", "b", "c", "d", "e"], p=[0.5, 0.3, 0.1, 0.07, 0.03], size=V))
        grouped = group_lambda(lam, TagMap(tags), min_group=10)
        total = sum(g.mean_lambda * g.count for g in grouped.groups) + grouped.omitted_lambda_sum
        assert total / V == pytest.approx(float(lam.mean()), abs=1e-12)

    def test_freq_share_with_counts(self):
        lam = np.array([0.5, 0.5, 0.5, 0.5])
        tags = TagMap(("a", "a", "b", "b"))
        freq = FrequencyTable(counts=np.array([3, 1, 4, 2]), source="ds")
        grouped = group_lambda(lam, tags, min_group=1, freq=freq)
        shares = {g.tag: g.freq_share for g in grouped.groups}
        assert shares["a"] == pytest.approx(0.4, abs=1e-15)
        assert shares["b"] == pytest.approx(0.6, abs=1e-15)


class TestContextFreeLambda:
    def test_fixed(self):
        assert np.array_equal(context_free_lambda(fixed_params(0.3, 1.0, 2, 4)), np.full(4, 0.3))

    def test_token_wise_and_context_share_token_component(self):
        rng = np.random.default_rng(26)
        raw = rng.normal(size=5)
        token = AdapterParams(
            interp=InterpolationSpec(kind="token_wise", raw_token_lambda=raw),
            temp=TemperatureParams(kind="fixed", fixed_value=1.0), k=2, vocab_size=5,
        )
        ctx = AdapterParams(
            interp=InterpolationSpec(
                kind="context_aware", raw_token_lambda=raw, raw_context_scale=rng.normal(size=4)
            ),
            temp=TemperatureParams(kind="fixed", fixed_value=1.0),
            k=2, vocab_size=5, d=4, token_embeddings=rng.normal(size=(5, 4)),
        )
        assert np.array_equal(context_free_lambda(token), context_free_lambda(ctx))


class TestFiles:
    def test_tag_file(self, tmp_path):
        path = tmp_path / "tags.tsv"
        path.write_text("0\tnoun\n2\tverb\n", encoding="utf-8")
        tags = load_tag_file(path, vocab_size=4)
        assert tags.tags == ("noun", "untagged", "verb", "untagged")

    def test_tag_file_out_of_range(self, tmp_path):
        path = tmp_path / "tags.tsv"
        path.write_text("9\tnoun\n", encoding="utf-8")
        with pytest.raises(TokenOutOfRange):
            load_tag_file(path, vocab_size=4)

    def test_frequency_roundtrip(self, tmp_path):
        freq = FrequencyTable(counts=np.array([5, 0, 2]), source="x")
        path = tmp_path / "freq.tsv"
        save_frequency_file(freq, path)
        back = load_frequency_file(path, vocab_size=3)
        assert np.array_equal(back.counts, freq.counts)
