"""Synthetic sequence-duplication data: examples of the form 0 w 0 w.

Each word w is drawn uniformly from {1..N}^w_len, so token 0 only ever marks
the two segment starts. Trained as a language model, only the second half is
predictable; the loss/accuracy mask covers exactly those positions: the one
predicting the second 0 plus the w_len positions predicting the second copy,
w_len + 1 targets per example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc

EVAL_STREAM_OFFSET = 1 << 32  # held-out batches index generator streams far from training steps


@dataclass(frozen=True)
class DupConfig:
    symbol_max: int = 127
    w_len: int = 511
    seed: int = 0

    def __post_init__(self):
        if self.symbol_max < 1 or self.w_len < 1:
            raise ValueError("symbol_max and w_len must be >= 1")

    @property
    def seq_len(self) -> int:
        return 2 * (self.w_len + 1)

    @property
    def vocab_size(self) -> int:
        return self.symbol_max + 1


def make_mask(w_len: int, batch_size: int = 1) -> np.ndarray:
    """Loss mask over positions whose next-token target is predictable."""
    l = 2 * (w_len + 1)
    mask = np.zeros((batch_size, l), dtype=bool)
    mask[:, w_len : 2 * w_len + 1] = True
    return mask


def gen_batch(cfg: DupConfig, batch_size: int, step: int):
    """Deterministic batch for (cfg.seed, step): tokens [b, 2(w+1)] and mask."""
    rng = tc.rng_stream(cfg.seed, step)
    w = rng.integers(1, cfg.symbol_max + 1, size=(batch_size, cfg.w_len), dtype=np.int64)
    zeros = np.zeros((batch_size, 1), dtype=np.int64)
    tokens = np.concatenate([zeros, w, zeros, w], axis=1)
    return tokens, make_mask(cfg.w_len, batch_size)


def next_token_targets(tokens: np.ndarray) -> np.ndarray:
    """targets[p] = tokens[p+1]; the last position gets a never-matching -2."""
    targets = np.full_like(tokens, -2)
    targets[:, :-1] = tokens[:, 1:]
    return targets


def copy_oracle(tokens: np.ndarray) -> np.ndarray:
    """Ground-truth predictor: copy the token one half-length back.

    Returns predictions for every position (prediction at p is for the token
    at p+1); positions before the copy rule applies hold -1. Raises on input
    that is not well-formed 0w0w.
    """
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    b, l = tokens.shape
    if l < 4 or l % 2 != 0:
        raise ValueError(f"sequence length {l} is not a valid 0w0w length")
    w_len = l // 2 - 1
    if not np.all(tokens[:, 0] == 0) or not np.all(tokens[:, w_len + 1] == 0):
        raise ValueError("malformed input: expected 0 at positions 0 and w_len+1")
    pred = np.full((b, l), -1, dtype=np.int64)
    pred[:, w_len:] = tokens[:, : l - w_len]
    return pred


def prediction_accuracy(pred: np.ndarray, tokens: np.ndarray, mask: np.ndarray) -> float:
    """Fraction of masked positions where pred matches the next token."""
    targets = next_token_targets(np.asarray(tokens))
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("no predictable positions: mask is all zero")
    return float(np.mean(pred[mask] == targets[mask]))


def dump_examples(cfg: DupConfig, count: int, stream, step0: int = 0,
                  batch_size: int = 64) -> None:
    """Write ``count`` examples, one per line of space-separated integers."""
    written = 0
    step = step0
    while written < count:
        take = min(batch_size, count - written)
        tokens, _ = gen_batch(cfg, take, step)
        for row in tokens:
            stream.write(" ".join(str(int(t)) for t in row) + "\n")
        written += take
        step += 1
