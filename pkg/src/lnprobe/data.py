"""Corpus loading, chunking, and MLM masking shared by training and eval."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .tokenizer import CLS, MASK, SEP, SPECIALS, WordTokenizer
from .errors import LnprobeError

_N_SPECIALS = len(SPECIALS)


def read_documents(path: str | Path) -> list[str]:
    """Blank-line delimited documents from a plain-text file."""
    text = Path(path).read_text(encoding="utf-8")
    docs = [d.strip() for d in text.split("\n\n")]
    docs = [d for d in docs if d]
    if not docs:
        raise LnprobeError(f"corpus {path} is empty")
    return docs


def chunk_ids(ids: list[int], max_seq_len: int) -> list[np.ndarray]:
    """Split one document's ids into [CLS] ... [SEP] chunks of at most
    max_seq_len tokens. Chunks never cross document boundaries."""
    body = max_seq_len - 2
    if body <= 0:
        raise ValueError("max_seq_len must be at least 3")
    chunks = []
    for start in range(0, len(ids), body):
        piece = ids[start : start + body]
        if piece:
            chunks.append(np.asarray([CLS] + piece + [SEP], dtype=np.int64))
    return chunks


def load_corpus(path: str | Path, tokenizer: WordTokenizer, max_seq_len: int) -> list[np.ndarray]:
    """Deterministic tokenization + chunking of a text corpus."""
    sequences = []
    for doc in read_documents(path):
        sequences.extend(chunk_ids(tokenizer.encode_words(doc), max_seq_len))
    if not sequences:
        raise LnprobeError(f"corpus {path} produced no sequences")
    return sequences


def maskable_positions(ids: np.ndarray) -> np.ndarray:
    """Positions eligible for MLM masking: everything except special tokens."""
    return np.nonzero(ids >= _N_SPECIALS)[0]


def mask_sequence(ids: np.ndarray, mask_prob: float, rng: np.random.Generator
                  ) -> tuple[np.ndarray, np.ndarray]:
    """Replace ceil(mask_prob * eligible) positions with [MASK].

    Returns (masked_ids, labels) where labels hold the original id at the
    masked positions and -1 elsewhere. Selected positions are always
    replaced by [MASK]; there is no 80/10/10 split.
    """
    eligible = maskable_positions(ids)
    labels = np.full_like(ids, -1)
    masked = ids.copy()
    if eligible.size == 0:
        return masked, labels
    n = min(eligible.size, math.ceil(mask_prob * eligible.size))
    chosen = rng.choice(eligible, size=n, replace=False)
    labels[chosen] = ids[chosen]
    masked[chosen] = MASK
    return masked, labels


def pad_batch(sequences: list[np.ndarray], labels: list[np.ndarray]
              ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to the batch max length; returns (ids, labels, attention_mask)."""
    T = max(len(s) for s in sequences)
    B = len(sequences)
    ids = np.zeros((B, T), dtype=np.int64)  # PAD == 0
    lab = np.full((B, T), -1, dtype=np.int64)
    mask = np.zeros((B, T), dtype=np.float64)
    for i, (s, l) in enumerate(zip(sequences, labels)):
        ids[i, : len(s)] = s
        lab[i, : len(l)] = l
        mask[i, : len(s)] = 1.0
    return ids, lab, mask
