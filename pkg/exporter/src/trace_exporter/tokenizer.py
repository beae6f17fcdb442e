"""Whitespace word-level tokenizer bundled with each model checkpoint."""

from __future__ import annotations

from collections import Counter
from pathlib import Path

UNK = "<unk>"


class WordTokenizer:
    def __init__(self, tokens: list[str]):
        if tokens[0] != UNK:
            raise ValueError("token 0 must be the unknown marker")
        if len(set(tokens)) != len(tokens):
            raise ValueError("tokens must be unique")
        self.tokens = list(tokens)
        self.index = {tok: i for i, tok in enumerate(tokens)}

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @classmethod
    def fit(cls, text: str, max_vocab: int | None = None) -> "WordTokenizer":
        counts = Counter(text.split())
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        if max_vocab is not None:
            ranked = ranked[: max_vocab - 1]
        return cls([UNK] + [tok for tok, _ in ranked])

    def encode(self, text: str) -> list[int]:
        unk = 0
        return [self.index.get(tok, unk) for tok in text.split()]

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "WordTokenizer":
        return cls(Path(path).read_text(encoding="utf-8").splitlines())
