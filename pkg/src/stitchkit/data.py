"""Class-conditional Markov-chain token classification tasks."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

VOCAB_SIZE = 64


@dataclass
class Batch:
    tokens: np.ndarray  # [batch, seq_len] int
    labels: np.ndarray  # [batch] int

    def __post_init__(self):
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.tokens.ndim != 2 or self.labels.shape != (self.tokens.shape[0],):
            raise ValueError(f"tokens {self.tokens.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, idx):
        return Batch(self.tokens[idx], self.labels[idx])

    def validate(self, vocab_size: int, num_classes: int):
        if self.tokens.size and (self.tokens.min() < 0 or self.tokens.max() >= vocab_size):
            raise ValueError(f"token ids must lie in [0, {vocab_size})")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= num_classes):
            raise ValueError(f"labels must lie in [0, {num_classes})")
        return self

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(self), batch_size):
            yield self[order[start:start + batch_size]]


@dataclass
class MarkovTask:
    """One domain: an initial distribution and transition matrix per class.

    ``sharpness`` scales the random logits of every transition row; larger
    values make classes easier to tell apart.
    """

    num_classes: int = 10
    seq_len: int = 16
    vocab_size: int = VOCAB_SIZE
    sharpness: float = 2.0
    seed: int = 0

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        shape = (self.num_classes, self.vocab_size, self.vocab_size)
        logits = self.sharpness * rng.standard_normal(shape)
        self.transitions = _row_softmax(logits)
        self.initial = _row_softmax(self.sharpness * rng.standard_normal((self.num_classes, self.vocab_size)))

    def sample(self, n: int, seed: int = 0) -> Batch:
        rng = np.random.default_rng(seed)
        labels = np.arange(n) % self.num_classes
        rng.shuffle(labels)
        tokens = np.empty((n, self.seq_len), dtype=np.int64)
        cum_init = np.cumsum(self.initial, axis=1)
        cum_trans = np.cumsum(self.transitions, axis=2)
        u = rng.random((n, self.seq_len))
        tokens[:, 0] = _draw(cum_init[labels], u[:, 0])
        for t in range(1, self.seq_len):
            tokens[:, t] = _draw(cum_trans[labels, tokens[:, t - 1]], u[:, t])
        return Batch(tokens, labels)

    def split(self, n_train: int, n_eval: int, seed: int = 0) -> tuple[Batch, Batch]:
        return self.sample(n_train, seed=2 * seed + 1), self.sample(n_eval, seed=2 * seed + 2)


def _row_softmax(x):
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _draw(cum_rows, u):
    idx = (cum_rows < u[:, None]).sum(axis=1)
    return np.minimum(idx, cum_rows.shape[1] - 1)


def source_and_target(num_classes=10, seq_len=16, sharpness=2.0, seed=0):
    """Two domains over the same vocabulary with independent chains."""
    src = MarkovTask(num_classes, seq_len, VOCAB_SIZE, sharpness, seed=1000 + seed)
    tgt = MarkovTask(num_classes, seq_len, VOCAB_SIZE, sharpness, seed=2000 + seed)
    return src, tgt
