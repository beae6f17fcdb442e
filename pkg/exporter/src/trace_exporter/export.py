"""Run a checkpointed causal LM over a corpus and emit trace/vocab/matrix files.

One record per corpus position i >= 1 (the first prediction needs at least one
context token): the context is the previous tokens through a sliding window of
stride 1 capped at the model's max context, f(x) is the final hidden state,
and the stored distribution is the full softmax or its top-q slice with ties
broken toward lower token ids. Records are written in corpus order.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .formats import TraceWriter, write_embedding_matrix, write_frequencies, write_vocabulary
from .model import load_model
from .tokenizer import WordTokenizer


@dataclass
class ExportConfig:
    model_dir: str
    corpus_path: str
    out_trace: str
    out_vocab: str | None = None
    out_matrix: str | None = None
    split_role: str = "train"  # train / validation / test, recorded in the manifest
    top_q: int = 0  # 0 exports the full distribution
    max_tokens: int | None = None
    batch_size: int = 256
    device: str = "cpu"

    def __post_init__(self):
        if self.top_q < 0:
            raise ValueError("top_q must be nonnegative")
        if self.split_role not in ("train", "validation", "test"):
            raise ValueError("split_role must be train, validation, or test")


def _topq_slice(probs: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    order = np.lexsort((np.arange(probs.size), -probs))[:q]
    return order.astype(np.uint32), probs[order]


def export(config: ExportConfig) -> dict:
    """Emit the trace (plus vocabulary and embedding-matrix files) and a manifest."""
    model, tokenizer = load_model(config.model_dir)
    model = model.to(config.device).eval()
    text = Path(config.corpus_path).read_text(encoding="utf-8")
    ids = tokenizer.encode(text)
    if config.max_tokens is not None:
        ids = ids[: config.max_tokens]
    n = len(ids)
    if n < 2:
        raise ValueError("corpus slice must hold at least two tokens")
    if config.top_q >= tokenizer.vocab_size:
        raise ValueError("top_q must be below the vocabulary size")

    ctx = model.cfg.max_context
    d = model.cfg.d_model
    V = tokenizer.vocab_size
    count = n - 1
    writer = TraceWriter(config.out_trace, V, d, count, q=config.top_q)
    ids_arr = np.asarray(ids, dtype=np.int64)

    def emit(hidden: np.ndarray, gold: int, probs: np.ndarray) -> None:
        if config.top_q:
            tok, pr = _topq_slice(probs, config.top_q)
            writer.add_topq(hidden, gold, tok, pr)
        else:
            writer.add_full(hidden, gold, probs)

    try:
        with torch.no_grad():
            # warm-up positions with context shorter than the window
            for i in range(1, min(ctx, n)):
                window = torch.tensor(ids_arr[:i][None, :], dtype=torch.long, device=config.device)
                hidden = model.hidden_states(window)[0, -1]
                probs = torch.softmax(model.lm_head(hidden), dim=-1)
                emit(hidden.cpu().numpy(), int(ids_arr[i]), probs.cpu().numpy())
            # full windows, batched, still stride 1
            if n > ctx:
                windows = np.lib.stride_tricks.sliding_window_view(ids_arr, ctx)[: n - ctx]
                for start in range(0, windows.shape[0], config.batch_size):
                    batch = torch.tensor(
                        windows[start : start + config.batch_size], dtype=torch.long,
                        device=config.device,
                    )
                    hidden = model.hidden_states(batch)[:, -1]
                    probs = torch.softmax(model.lm_head(hidden), dim=-1)
                    hidden_np = hidden.cpu().numpy()
                    probs_np = probs.cpu().numpy()
                    for row in range(batch.shape[0]):
                        gold = int(ids_arr[ctx + start + row])
                        emit(hidden_np[row], gold, probs_np[row])
        writer.close()
        if config.out_vocab:
            write_vocabulary(tokenizer.tokens, config.out_vocab)
        if config.out_matrix:
            write_embedding_matrix(model.output_embedding_matrix().cpu().numpy(), config.out_matrix)
    except BaseException:
        # never leave a partial trace behind
        writer.abort()
        for path in (config.out_vocab, config.out_matrix):
            if path:
                Path(path).unlink(missing_ok=True)
        raise

    manifest = {
        "command": "export",
        "config": asdict(config),
        "model_config": asdict(model.cfg),
        "records": count,
        "hidden_state_convention": (
            "context embedding = final hidden state after the last layer norm, "
            "before the output projection; token matrix = output-projection rows"
        ),
        "torch_version": torch.__version__,
    }
    Path(str(config.out_trace) + ".manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )
    return manifest


def export_frequencies(corpus_path, model_dir, out_path) -> np.ndarray:
    """Exact token tally of a corpus under the model's own tokenizer."""
    tokenizer = WordTokenizer.load(Path(model_dir) / "vocab.txt")
    text = Path(corpus_path).read_text(encoding="utf-8")
    counts = np.bincount(
        np.asarray(tokenizer.encode(text), dtype=np.int64), minlength=tokenizer.vocab_size
    )
    write_frequencies(counts, out_path)
    return counts
