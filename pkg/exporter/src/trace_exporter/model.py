"""A small GPT-style causal LM: pretraining, checkpointing, hidden-state access.

The context encoding exported as f(x) is the hidden state after the final
layer norm and before the output projection; the exported token matrix W is
the output-projection weight (tied to the input embedding), which lives in
the same space as that hidden state.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn

from .tokenizer import WordTokenizer


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_context: int = 32
    dropout: float = 0.0


class TinyCausalLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.d_model)
        self.pos_emb = nn.Embedding(cfg.max_context, cfg.d_model)
        layer = nn.TransformerEncoderLayer(
            d_model=cfg.d_model, nhead=cfg.n_heads, dim_feedforward=cfg.d_ff,
            dropout=cfg.dropout, batch_first=True, norm_first=True,
        )
        self.blocks = nn.TransformerEncoder(layer, num_layers=cfg.n_layers, enable_nested_tensor=False)
        self.final_norm = nn.LayerNorm(cfg.d_model)
        self.lm_head = nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
        self.lm_head.weight = self.tok_emb.weight  # tied

    def hidden_states(self, tokens: torch.Tensor) -> torch.Tensor:
        """(batch, seq) -> (batch, seq, d): post-final-norm, pre-projection."""
        seq_len = tokens.shape[1]
        if seq_len > self.cfg.max_context:
            raise ValueError(f"sequence length {seq_len} exceeds max context {self.cfg.max_context}")
        pos = torch.arange(seq_len, device=tokens.device)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None]
        mask = nn.Transformer.generate_square_subsequent_mask(seq_len, device=tokens.device)
        x = self.blocks(x, mask=mask, is_causal=True)
        return self.final_norm(x)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.lm_head(self.hidden_states(tokens))

    def output_embedding_matrix(self) -> torch.Tensor:
        return self.lm_head.weight.detach()


def save_model(model: TinyCausalLM, tokenizer: WordTokenizer, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(asdict(model.cfg), indent=1) + "\n")
    torch.save(model.state_dict(), out / "weights.pt")
    tokenizer.save(out / "vocab.txt")


def load_model(model_dir) -> tuple[TinyCausalLM, WordTokenizer]:
    model_dir = Path(model_dir)
    cfg = ModelConfig(**json.loads((model_dir / "config.json").read_text()))
    model = TinyCausalLM(cfg)
    model.load_state_dict(torch.load(model_dir / "weights.pt", weights_only=True))
    model.eval()
    return model, WordTokenizer.load(model_dir / "vocab.txt")


def pretrain(
    corpus_path,
    out_dir,
    d_model: int = 64,
    n_layers: int = 2,
    n_heads: int = 4,
    max_context: int = 32,
    max_vocab: int | None = None,
    epochs: int = 4,
    batch_size: int = 64,
    lr: float = 3e-3,
    seed: int = 0,
    device: str = "cpu",
) -> Path:
    """Fit the tiny LM on a text corpus and save a checkpoint directory."""
    torch.manual_seed(seed)
    text = Path(corpus_path).read_text(encoding="utf-8")
    tokenizer = WordTokenizer.fit(text, max_vocab=max_vocab)
    ids = torch.tensor(tokenizer.encode(text), dtype=torch.long)
    cfg = ModelConfig(
        vocab_size=tokenizer.vocab_size, d_model=d_model, n_layers=n_layers,
        n_heads=n_heads, d_ff=4 * d_model, max_context=max_context,
    )
    model = TinyCausalLM(cfg).to(device)
    model.train()
    opt = torch.optim.AdamW(model.parameters(), lr=lr)
    loss_fn = nn.CrossEntropyLoss()

    # non-overlapping chunks of max_context + 1 tokens
    n_chunks = (ids.numel() - 1) // (max_context + 1)
    chunks = ids[: n_chunks * (max_context + 1)].reshape(n_chunks, max_context + 1)
    gen = torch.Generator().manual_seed(seed)
    for epoch in range(epochs):
        order = torch.randperm(n_chunks, generator=gen)
        total = 0.0
        for start in range(0, n_chunks, batch_size):
            batch = chunks[order[start : start + batch_size]].to(device)
            logits = model(batch[:, :-1])
            loss = loss_fn(logits.reshape(-1, cfg.vocab_size), batch[:, 1:].reshape(-1))
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * batch.shape[0]
        ppl = math.exp(total / n_chunks)
        print(f"epoch {epoch}: train perplexity {ppl:.2f}")
    model.eval()
    save_model(model.cpu(), tokenizer, out_dir)
    return Path(out_dir)
