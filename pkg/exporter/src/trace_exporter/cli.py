"""Command line for pretraining the bundled tiny LM and exporting traces."""

from __future__ import annotations

import argparse
import sys

from .export import ExportConfig, export, export_frequencies
from .model import pretrain


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="trace-exporter", description=__doc__)
    sub = parser.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("pretrain", help="fit the bundled causal LM on a text corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--max-context", type=int, default=32)
    p.add_argument("--max-vocab", type=int, default=None)
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--device", default="cpu")

    e = sub.add_parser("export", help="emit trace / vocabulary / embedding-matrix files")
    e.add_argument("--model", required=True, help="checkpoint directory")
    e.add_argument("--corpus", required=True)
    e.add_argument("--out-trace", required=True)
    e.add_argument("--out-vocab", default=None)
    e.add_argument("--out-matrix", default=None)
    e.add_argument("--split-role", default="train", choices=("train", "validation", "test"))
    e.add_argument("--top-q", type=int, default=0, help="0 exports the full distribution")
    e.add_argument("--max-tokens", type=int, default=None)
    e.add_argument("--batch-size", type=int, default=256)
    e.add_argument("--device", default="cpu")

    f = sub.add_parser("export-freq", help="token frequency file for a corpus")
    f.add_argument("--model", required=True)
    f.add_argument("--corpus", required=True)
    f.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    if args.cmd == "pretrain":
        pretrain(
            args.corpus, args.out_dir, d_model=args.d_model, n_layers=args.layers,
            n_heads=args.heads, max_context=args.max_context, max_vocab=args.max_vocab,
            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
            seed=args.seed, device=args.device,
        )
        print(f"checkpoint written to {args.out_dir}")
    elif args.cmd == "export":
        manifest = export(
            ExportConfig(
                model_dir=args.model, corpus_path=args.corpus, out_trace=args.out_trace,
                out_vocab=args.out_vocab, out_matrix=args.out_matrix,
                split_role=args.split_role, top_q=args.top_q,
                max_tokens=args.max_tokens, batch_size=args.batch_size, device=args.device,
            )
        )
        print(f"exported {manifest['records']} records to {args.out_trace}")
    else:
        counts = export_frequencies(args.corpus, args.model, args.out)
        print(f"tallied {int(counts.sum())} tokens into {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
