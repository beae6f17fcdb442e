import math

import numpy as np
import pytest

from knnadapt.adapter import fixed_params
from knnadapt.core import SparseTopQ
from knnadapt.errors import ArityMismatch, MassExceedsOne
from knnadapt.evaluation import (
    AccessMode,
    densify_topq,
    matrix_table,
    matrix_to_csv,
    perplexity,
    run_matrix,
)
from knnadapt.trace_io import Trace, TraceHeader, TraceRecord


def make_trace(prob_rows, golds, d=4):
    V = len(prob_rows[0])
    records = [
        TraceRecord(embedding=np.zeros(d, dtype=np.float32), gold=g, probs=np.asarray(p, dtype=np.float64))
        for p, g in zip(prob_rows, golds)
    ]
    header = TraceHeader(vocab_size=V, d=d, mode="full", q=0, count=len(records))
    return Trace(header, records)


class TestDensify:
    def test_full_identity(self):
        p = np.array([0.7, 0.1, 0.1, 0.1])
        out = densify_topq(p, AccessMode.full(), 4)
        assert np.array_equal(out, p)

    def test_footnote_fill(self):
        p = np.array([0.7, 0.15, 0.1, 0.05])
        out = densify_topq(p, AccessMode.top(1), 4)
        assert np.allclose(out, [0.7, 0.1, 0.1, 0.1], atol=1e-15)

    def test_exact_mass_leaves_zero_fill(self):
        p = np.array([1.0, 0.0, 0.0, 0.0])
        out = densify_topq(p, AccessMode.top(2), 4)
        assert np.array_equal(out, [1.0, 0.0, 0.0, 0.0])

    def test_tie_break_keeps_lower_token_id(self):
        p = np.array([0.5, 0.25, 0.25, 0.0])
        out = densify_topq(p, AccessMode.top(2), 4)
        assert np.allclose(out, [0.5, 0.25, 0.125, 0.125], atol=1e-15)

    def test_sparse_input_narrowed(self):
        sp = SparseTopQ(token_ids=np.array([2, 0, 1]), probs=np.array([0.5, 0.3, 0.1]))
        out = densify_topq(sp, AccessMode.top(2), 4)
        assert out[2] == 0.5 and out[0] == 0.3
        assert out[1] == pytest.approx(0.1, abs=1e-15) and out[3] == pytest.approx(0.1, abs=1e-15)

    def test_sparse_cannot_widen(self):
        sp = SparseTopQ(token_ids=np.array([2]), probs=np.array([0.5]))
        with pytest.raises(ArityMismatch):
            densify_topq(sp, AccessMode.top(2), 4)

    def test_sparse_under_full_mode_rejected(self):
        sp = SparseTopQ(token_ids=np.array([2]), probs=np.array([0.5]))
        with pytest.raises(ArityMismatch):
            densify_topq(sp, AccessMode.full(), 4)

    def test_mass_exceeds_one(self):
        with pytest.raises(MassExceedsOne):
            densify_topq(np.array([0.8, 0.8, 0.0, 0.0]), AccessMode.top(2), 4)

    def test_q_must_be_below_vocab(self):
        with pytest.raises(ArityMismatch):
            densify_topq(np.full(4, 0.25), AccessMode.top(4), 4)

    def test_near_full_q_with_exact_remainder_matches_full(self):
        p = np.array([0.5, 0.25, 0.125, 0.125])
        out = densify_topq(p, AccessMode.top(3), 4)
        assert np.array_equal(out, p)


class TestPerplexity:
    def test_uniform(self):
        trace = make_trace([np.full(4, 0.25)] * 3, [0, 1, 2])
        res = perplexity(trace)
        assert res.perplexity == pytest.approx(4.0, abs=1e-12)
        assert res.token_count == 3

    def test_one_hot(self):
        rows = []
        for g in (0, 3):
            p = np.zeros(4)
            p[g] = 1.0
            rows.append(p)
        res = perplexity(make_trace(rows, [0, 3]))
        assert res.perplexity == pytest.approx(1.0, abs=1e-12)

    def test_geometric_mean(self):
        trace = make_trace([[0.5, 0.5, 0, 0], [0.125, 0.875, 0, 0]], [0, 0])
        res = perplexity(trace)
        assert res.perplexity == pytest.approx(4.0, rel=1e-12)

    def test_result_invariant(self):
        trace = make_trace([[0.3, 0.3, 0.2, 0.2]] * 5, [0, 1, 2, 3, 0])
        res = perplexity(trace, mode=AccessMode.top(2))
        assert res.perplexity == pytest.approx(math.exp(res.mean_nll), abs=1e-12)

    def test_retrieval_needs_datastore(self):
        trace = make_trace([np.full(4, 0.25)], [0])
        with pytest.raises(ArityMismatch):
            perplexity(trace, params=fixed_params(0.5, 1.0, 1, 4))


class TestRunMatrix:
    def test_two_variants_two_rows(self, fixture):
        trace = Trace(fixture.test_trace.header, fixture.test_trace.records[:50])
        rows = run_matrix(
            [("t", trace)],
            [("ds", fixture.datastore)],
            [("standard", None), ("knn", fixed_params(0.3, 1.0, fixture.k, 64))],
            [AccessMode.full()],
        )
        assert len(rows) == 2
        assert rows[0].model == "standard" and rows[0].datastore == ""
        assert rows[1].model == "knn" and rows[1].datastore == "ds"

    def test_multi_datastore_shape(self, fixture):
        trace = Trace(fixture.test_trace.header, fixture.test_trace.records[:50])
        stores = [("a", fixture.datastore), ("b", fixture.datastore), ("c", fixture.datastore)]
        rows = run_matrix(
            [("t", trace)], stores,
            [("standard", None), ("knn", fixed_params(0.3, 1.0, fixture.k, 64))],
            [AccessMode.full()],
        )
        assert len(rows) == 4  # one shared standard row + one knn row per datastore
        assert [r.datastore for r in rows] == ["", "a", "b", "c"]

    def test_cell_matches_direct_call(self, fixture):
        trace = Trace(fixture.test_trace.header, fixture.test_trace.records[:50])
        rows = run_matrix([("t", trace)], [], [("standard", None)], [AccessMode.full()])
        direct = perplexity(trace)
        assert rows[0].perplexity == direct.perplexity
        assert rows[0].mean_nll == direct.mean_nll

    def test_csv_and_table(self, tmp_path, fixture):
        trace = Trace(fixture.test_trace.header, fixture.test_trace.records[:20])
        rows = run_matrix([("t", trace)], [], [("standard", None)], [AccessMode.full(), AccessMode.top(3)])
        path = tmp_path / "m.csv"
        matrix_to_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "model,datastore,access_mode,tokens,mean_nll,perplexity"
        assert len(lines) == 3
        text = matrix_table(rows)
        assert "standard" in text and "top-3" in text
