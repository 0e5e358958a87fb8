"""Byte-level corpus, batch sampling and held-out perplexity."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from prunelab.errors import CorpusTooSmall, EmptySplit, IoFailure
from prunelab.model import TransformerModel, forward
from prunelab.numerics import Rng

VOCAB_SIZE = 257
PAD_ID = 256


def encode(text: str | bytes) -> np.ndarray:
    raw = text.encode("utf-8") if isinstance(text, str) else bytes(text)
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def decode(ids) -> str:
    return bytes(int(i) for i in ids if 0 <= int(i) < 256).decode("utf-8", errors="replace")


@dataclass
class Corpus:
    """Token ids of a byte file split by position into train / held-out."""
    path: str
    ids: np.ndarray
    split: int

    @classmethod
    def load(cls, path, holdout: float = 0.02) -> "Corpus":
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise IoFailure(f"cannot read corpus {path}: {exc}") from exc
        return cls.from_bytes(raw, holdout, str(path))

    @classmethod
    def from_bytes(cls, raw: bytes, holdout: float = 0.02, path: str = "<memory>") -> "Corpus":
        ids = encode(raw)
        return cls(path, ids, int(round(len(ids) * (1.0 - holdout))))

    @property
    def train(self) -> np.ndarray:
        return self.ids[:self.split]

    @property
    def heldout(self) -> np.ndarray:
        return self.ids[self.split:]


class BatchSampler:
    """Uniformly placed training windows of ``seq_len + 1`` tokens.

    Windows never cross the train/held-out boundary. ``max_end`` records the
    furthest token index ever yielded, so isolation is checkable.
    """

    def __init__(self, corpus: Corpus, n_seqs: int, seq_len: int, rng: Rng):
        if corpus.split < seq_len + 1 or n_seqs < 1:
            raise CorpusTooSmall(f"train split has {corpus.split} tokens, need at least {seq_len + 1}")
        self.corpus = corpus
        self.n_seqs = n_seqs
        self.seq_len = seq_len
        self.rng = rng
        self.max_end = 0

    def sample(self) -> np.ndarray:
        width = self.seq_len + 1
        starts = self.rng.integers(0, self.corpus.split - width + 1, size=self.n_seqs)
        self.max_end = max(self.max_end, int(starts.max()) + width)
        return np.stack([self.corpus.ids[s:s + width] for s in starts])


def evaluate_perplexity(model: TransformerModel, ids: np.ndarray, seq_len: int | None = None,
                        batch_size: int = 32, max_tokens: int | None = None) -> float:
    """``exp`` of mean next-token cross-entropy over non-overlapping windows.

    Window ``k`` covers ``ids[k*seq_len : (k+1)*seq_len + 1]`` so every token
    after the first is predicted exactly once.
    """
    seq_len = seq_len or model.config.max_seq_len
    ids = np.asarray(ids)
    if max_tokens is not None:
        ids = ids[:max_tokens]
    if len(ids) < 2:
        raise EmptySplit("evaluation split needs at least two tokens")
    n_full = (len(ids) - 1) // seq_len
    total, count = 0.0, 0
    windows = [ids[k * seq_len:(k + 1) * seq_len + 1] for k in range(n_full)]
    for i in range(0, len(windows), batch_size):
        chunk = np.stack(windows[i:i + batch_size])
        loss, tape = forward(model, chunk)
        total += loss * tape.n_tokens
        count += tape.n_tokens
    tail = ids[n_full * seq_len:]
    if len(tail) >= 2:
        loss, tape = forward(model, tail)
        total += loss * tape.n_tokens
        count += tape.n_tokens
    return math.exp(total / count)
