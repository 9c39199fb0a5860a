"""Corpus-built word-level tokenizer with the usual special tokens."""

from __future__ import annotations

import json
import re
from collections import Counter
from pathlib import Path

SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
PAD, UNK, CLS, SEP, MASK = range(5)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def word_split(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class WordTokenizer:
    """Frequency-capped word vocabulary; everything else maps to [UNK]."""

    def __init__(self, vocab: list[str]):
        if vocab[: len(SPECIALS)] != SPECIALS:
            raise ValueError("vocabulary must start with the special tokens")
        self.vocab = list(vocab)
        self.token_to_id = {tok: i for i, tok in enumerate(self.vocab)}

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def train(cls, texts: list[str], max_vocab: int) -> "WordTokenizer":
        if max_vocab <= len(SPECIALS):
            raise ValueError(f"max_vocab must exceed {len(SPECIALS)}")
        counts = Counter()
        for text in texts:
            counts.update(word_split(text))
        # Deterministic: break frequency ties alphabetically.
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        words = [w for w, _ in ordered[: max_vocab - len(SPECIALS)]]
        return cls(SPECIALS + words)

    def encode_words(self, text: str) -> list[int]:
        return [self.token_to_id.get(w, UNK) for w in word_split(text)]

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.vocab, fh)

    @classmethod
    def load(cls, path: str | Path) -> "WordTokenizer":
        with open(path, "r", encoding="utf-8") as fh:
            return cls(json.load(fh))
