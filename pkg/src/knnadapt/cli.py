"""Command-line surface: fixture generation, datastore building, training,
tuning, evaluation, validation, and analysis of learned parameters.

Every command that produces files also writes a JSON run manifest (flags,
seeds, input digests, tool version) next to its outputs; re-running with the
same flags reproduces the outputs byte-identically.

Exit codes: 0 success, 2 flag or validation error, 3 data-format error,
4 numerical failure. Errors print one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, analysis, datastore as ds_mod, evaluation, toy, trace_io, trainer
from .adapter import AdapterParams, fixed_params, load_params, save_params
from .errors import FormatError, KnnAdaptError, NonFiniteLoss
from .evaluation import AccessMode

INTERP_ALIASES = {
    "fixed": "fixed_lambda",
    "single": "single_adaptive",
    "token": "token_wise",
    "context": "context_aware",
}
TEMP_ALIASES = {"fixed": "fixed", "single": "single_adaptive", "neighbor": "neighbor_wise"}


def parse_variant(text: str) -> tuple[str, str]:
    try:
        interp, temp = text.split(":")
        return INTERP_ALIASES[interp], TEMP_ALIASES[temp]
    except (ValueError, KeyError):
        raise KnnAdaptError(
            f"variant must be one of {{{','.join(INTERP_ALIASES)}}}:{{{','.join(TEMP_ALIASES)}}}, got {text!r}"
        )


def parse_access(text: str) -> AccessMode:
    if text == "full":
        return AccessMode.full()
    if text.startswith("top-"):
        return AccessMode.top(int(text[4:]))
    raise KnnAdaptError(f"access must be 'full' or 'top-N', got {text!r}")


def _digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path: Path, command: str, args: argparse.Namespace, inputs: list[Path]) -> None:
    flags = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {
        "command": command,
        "tool_version": __version__,
        "flags": {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(flags.items())},
        "input_digests": {str(p): _digest(p) for p in inputs},
    }
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def cmd_gen_toy(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    if len(sizes) != 3:
        raise KnnAdaptError("--sizes must be datastore,val,test")
    if args.k > sizes[0]:
        raise KnnAdaptError(f"--k {args.k} larger than the datastore size {sizes[0]}")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    source = dataclasses.replace(toy.DEFAULT_SOURCE_SPEC, vocab_size=args.vocab, seed=args.source_seed)
    target = dataclasses.replace(toy.DEFAULT_TARGET_SPEC, vocab_size=args.vocab, seed=args.target_seed)
    fx = toy.build_fixture(
        source, target,
        sizes=toy.FixtureSizes(args.source_len, *sizes),
        d=args.d, k=args.k, embed_seed=args.embed_seed, metric=args.metric,
    )
    ds_mod.save(fx.datastore, out / "datastore.knds")
    trace_io.write_trace(fx.val_trace.header, fx.val_trace.records, out / "val.knnt")
    trace_io.write_trace(fx.test_trace.header, fx.test_trace.records, out / "test.knnt")
    fx.vocab.save(out / "vocab.txt")
    trace_io.save_embedding_matrix(fx.W, out / "token_embeddings.knnw")
    (out / "fixture.json").write_text(
        json.dumps(
            {
                "source_spec": dataclasses.asdict(fx.source_spec),
                "target_spec": dataclasses.asdict(fx.target_spec),
                "sizes": dataclasses.asdict(fx.sizes),
                "d": fx.d, "k": fx.k, "embed_seed": fx.embed_seed,
                "ngram_order": fx.ngram_order, "alpha": fx.alpha,
                "metric": fx.datastore.metric,
            },
            indent=1, sort_keys=True,
        ) + "\n",
        encoding="utf-8",
    )
    write_manifest(out / "manifest.json", "gen-toy", args, [])
    print(f"wrote fixture to {out}")
    return 0


def cmd_build_datastore(args) -> int:
    trace = trace_io.load_trace(args.trace)
    records = [(rec.embedding, rec.gold) for rec in trace.records]
    ds = ds_mod.build(records, metric=args.metric)
    ds_mod.save(ds, args.out)
    write_manifest(Path(str(args.out) + ".manifest.json"), "build-datastore", args, [Path(args.trace)])
    print(f"datastore: {len(ds)} entries, d={ds.d}, metric={ds.metric} -> {args.out}")
    return 0


def _load_examples(trace_path, ds, k, access):
    trace = trace_io.load_trace(trace_path)
    return trace, trainer.precompute_examples(trace, ds, k, access)


def cmd_train(args) -> int:
    variant = parse_variant(args.variant)
    access = parse_access(args.access)
    ds = ds_mod.load(args.datastore)
    if args.k > len(ds):
        raise KnnAdaptError(f"--k {args.k} larger than the datastore size {len(ds)}")
    _, examples = _load_examples(args.train_trace, ds, args.k, access)
    W = trace_io.load_embedding_matrix(args.w) if args.w else None
    if variant[0] == "context_aware" and W is None:
        raise KnnAdaptError("context variants need --w (token embedding matrix)")
    init = trainer.InitConfig(
        lambda_single=args.init_lambda if args.init_lambda is not None else 0.25,
        token_lambda=args.init_lambda if args.init_lambda is not None else 0.1,
        context_token_lambda=args.init_lambda if args.init_lambda is not None else 0.1,
        temperature=args.init_t,
        neighbor_temperature=args.init_t,
    )
    cfg = trainer.TrainConfig(
        learning_rate=args.lr, batch_size=args.batch, max_epochs=args.epochs,
        plateau_tol=args.plateau_tol, seed=args.seed, init=init,
    )
    report = trainer.sgd_train(
        examples, variant, cfg, W=W,
        fixed_lambda=args.fixed_lambda, fixed_t=args.fixed_t, metric=ds.metric,
    )
    save_params(report.final_params, args.out_params)
    inputs = [Path(args.train_trace), Path(args.datastore)] + ([Path(args.w)] if args.w else [])
    write_manifest(Path(str(args.out_params) + ".manifest.json"), "train", args, inputs)
    if args.report_csv:
        trainer.write_report_csv(report, args.report_csv)
    print(
        f"trained {args.variant}: epochs={len(report.epoch_mean_nll)} steps={report.step_count} "
        f"final mean nll={report.epoch_mean_nll[-1]:.6f} -> {args.out_params}"
    )
    return 0


def cmd_tune(args) -> int:
    access = parse_access(args.access)
    ds = ds_mod.load(args.datastore)
    _, examples = _load_examples(args.trace, ds, args.k, access)
    lam_grid = [float(v) for v in args.lambda_grid.split(",")] if args.lambda_grid else trainer.DEFAULT_LAMBDA_GRID
    t_grid = [float(v) for v in args.t_grid.split(",")] if args.t_grid else trainer.DEFAULT_TEMP_GRID
    best = trainer.grid_search_baseline(examples, lam_grid, t_grid)
    params = fixed_params(best.lam, best.t, args.k, ds_vocab_size(examples), metric=ds.metric)
    save_params(params, args.out_params)
    write_manifest(
        Path(str(args.out_params) + ".manifest.json"), "tune", args,
        [Path(args.trace), Path(args.datastore)],
    )
    print(f"best lambda={best.lam} t={best.t} mean nll={best.nll:.6f} -> {args.out_params}")
    return 0


def ds_vocab_size(examples) -> int:
    return int(examples[0].p_lm.size)


def cmd_eval(args) -> int:
    access = parse_access(args.access)
    trace = trace_io.load_trace(args.test_trace)
    inputs = [Path(args.test_trace)]
    if args.standard:
        variants = [("standard", None)]
    elif args.params:
        params = load_params(args.params)
        if params.interp.kind == "context_aware":
            if not args.w:
                raise KnnAdaptError("context-aware parameters need --w")
            params = dataclasses.replace(
                params, token_embeddings=trace_io.load_embedding_matrix(args.w)
            )
            inputs.append(Path(args.w))
        variants = [(f"{params.interp.kind}/{params.temp.kind}", params)]
        inputs.append(Path(args.params))
    else:
        if args.fixed_lambda is None or args.fixed_t is None:
            raise KnnAdaptError("provide --standard, --params, or --fixed-lambda with --fixed-t")
        variants = [
            ("knn-lm", fixed_params(args.fixed_lambda, args.fixed_t, args.k, trace.header.vocab_size))
        ]
    stores = []
    for path in args.datastore or []:
        stores.append((Path(path).stem, ds_mod.load(path)))
        inputs.append(Path(path))
    if variants[0][1] is not None and not stores:
        raise KnnAdaptError("retrieval-based evaluation needs at least one --datastore")
    rows = evaluation.run_matrix([(Path(args.test_trace).stem, trace)], stores, variants, [access])
    print(evaluation.matrix_table(rows))
    if args.csv:
        evaluation.matrix_to_csv(rows, args.csv)
        write_manifest(Path(str(args.csv) + ".manifest.json"), "eval", args, inputs)
    return 0


def cmd_analyze(args) -> int:
    params = load_params(args.params)
    lam = analysis.context_free_lambda(params)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [Path(args.params)]
    sources: list[tuple[str, analysis.FrequencyTable]] = []
    if args.datastore:
        ds = ds_mod.load(args.datastore)
        sources.append(("datastore", analysis.token_frequency(ds, params.vocab_size)))
        inputs.append(Path(args.datastore))
    for path in args.freq_file or []:
        sources.append(
            (Path(path).stem, analysis.load_frequency_file(path, params.vocab_size, label=Path(path).stem))
        )
        inputs.append(Path(path))
    if not sources and not args.tag_file:
        raise KnnAdaptError("analyze needs --datastore, --freq-file, or --tag-file")
    corr_rows = []
    for label, freq in sources:
        try:
            res = analysis.spearman(lam, freq.counts.astype(np.float64))
            corr_rows.append((label, res, ""))
        except analysis.DegenerateInput as exc:
            corr_rows.append((label, None, str(exc)))
    if corr_rows:
        analysis.write_correlation_csv(corr_rows, out / "correlations.csv")
    if args.tag_file:
        tags = analysis.load_tag_file(args.tag_file, params.vocab_size)
        inputs.append(Path(args.tag_file))
        freq = sources[0][1] if sources else None
        grouped = analysis.group_lambda(lam, tags, min_group=args.min_group, freq=freq)
        analysis.write_group_csv(grouped, out / "groups.csv")
    write_manifest(out / "manifest.json", "analyze", args, inputs)
    print(f"analysis written to {out}")
    return 0


def cmd_validate_trace(args) -> int:
    report = trace_io.validate_trace(args.trace, strict=args.strict)
    counts: dict[str, int] = {}
    for v in report.violations:
        counts[v.kind] = counts.get(v.kind, 0) + 1
    print(
        json.dumps(
            {
                "path": report.path,
                "records_checked": report.records_checked,
                "ok": report.ok,
                "violations": counts,
            }
        )
    )
    for v in report.violations[:20]:
        print(f"  record {v.record_index}: {v.kind}: {v.message}")
    return 0 if report.ok else 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="knnadapt", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="cmd", required=True)

    g = sub.add_parser("gen-toy", help="write a synthetic end-to-end fixture")
    g.add_argument("--out-dir", required=True)
    g.add_argument("--source-seed", type=int, default=toy.DEFAULT_SOURCE_SPEC.seed)
    g.add_argument("--target-seed", type=int, default=toy.DEFAULT_TARGET_SPEC.seed)
    g.add_argument("--vocab", type=int, default=64)
    g.add_argument("--d", type=int, default=toy.DEFAULT_D)
    g.add_argument("--k", type=int, default=toy.DEFAULT_K)
    g.add_argument("--sizes", default="20000,2000,2000", help="datastore,val,test")
    g.add_argument("--source-len", type=int, default=30000)
    g.add_argument("--embed-seed", type=int, default=toy.DEFAULT_EMBED_SEED)
    g.add_argument("--metric", choices=ds_mod.METRICS, default="squared_l2")
    g.set_defaults(func=cmd_gen_toy)

    b = sub.add_parser("build-datastore", help="build a datastore from a trace")
    b.add_argument("--trace", required=True)
    b.add_argument("--metric", choices=ds_mod.METRICS, default="squared_l2")
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_build_datastore)

    t = sub.add_parser("train", help="train adapter parameters with SGD")
    t.add_argument("--train-trace", required=True)
    t.add_argument("--datastore", required=True)
    t.add_argument("--out-params", required=True)
    t.add_argument("--variant", default="token:single",
                   help="interp:temp, e.g. token:single, fixed:neighbor")
    t.add_argument("--k", type=int, default=32)
    t.add_argument("--init-lambda", type=float, default=None)
    t.add_argument("--init-t", type=float, default=1.0)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--batch", type=int, default=128)
    t.add_argument("--epochs", type=int, default=5)
    t.add_argument("--plateau-tol", type=float, default=1e-4)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--access", default="full")
    t.add_argument("--w", default=None, help="token embedding matrix (context variants)")
    t.add_argument("--fixed-lambda", type=float, default=None)
    t.add_argument("--fixed-t", type=float, default=None)
    t.add_argument("--report-csv", default=None)
    t.set_defaults(func=cmd_train)

    u = sub.add_parser("tune", help="grid-search the fixed (lambda, t) baseline")
    u.add_argument("--trace", required=True)
    u.add_argument("--datastore", required=True)
    u.add_argument("--out-params", required=True)
    u.add_argument("--k", type=int, default=32)
    u.add_argument("--lambda-grid", default=None, help="comma-separated values")
    u.add_argument("--t-grid", default=None, help="comma-separated values")
    u.add_argument("--access", default="full")
    u.set_defaults(func=cmd_tune)

    e = sub.add_parser("eval", help="evaluate perplexity")
    e.add_argument("--test-trace", required=True)
    e.add_argument("--datastore", action="append", default=None)
    e.add_argument("--params", default=None)
    e.add_argument("--standard", action="store_true")
    e.add_argument("--fixed-lambda", type=float, default=None)
    e.add_argument("--fixed-t", type=float, default=None)
    e.add_argument("--k", type=int, default=32)
    e.add_argument("--w", default=None)
    e.add_argument("--access", default="full")
    e.add_argument("--csv", default=None)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="correlations and tag groups of learned weights")
    a.add_argument("--params", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--datastore", default=None)
    a.add_argument("--freq-file", action="append", default=None)
    a.add_argument("--tag-file", default=None)
    a.add_argument("--min-group", type=int, default=10)
    a.set_defaults(func=cmd_analyze)

    v = sub.add_parser("validate-trace", help="conformance-check a trace file")
    v.add_argument("--trace", required=True)
    v.add_argument("--strict", action="store_true")
    v.set_defaults(func=cmd_validate_trace)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NonFiniteLoss as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 4
    except FormatError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 3
    except (KnnAdaptError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
