"""Microbenchmarks for the scaling claims: wall-clock attention timing at a
fixed token budget, and peak-activation memory reports for reversible vs
stored-activation backward.

The timing protocol holds batch * length constant, so dense attention time
grows linearly with length (b*l^2 = budget*l) while bucketed attention with a
fixed chunk length stays flat (the bucket count scales as 2l/chunk_len).
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import _lsh_core_forward, _round_tables, dense_causal_attention, normalize_rows
from .hashing import sample_rotation
from .model import Model, ModelConfig
from .tensor import MemMeter, Tensor


@dataclass(frozen=True)
class BenchSpec:
    kinds: tuple = ("dense", "lsh")
    lengths: tuple = (1024, 2048, 4096, 8192)
    budget: int = 1 << 17
    reps: int = 5
    warmup: int = 2
    d_k: int = 64
    chunk_len: int = 64  # bucket count derives as 2l/chunk_len, keeping chunks fixed
    n_rounds: int = 1
    seed: int = 0

    def __post_init__(self):
        for l in self.lengths:
            if l < 1 or self.budget % l != 0:
                raise ValueError(f"budget {self.budget} is not a positive multiple of length {l}")
        for kind in self.kinds:
            if kind not in ("dense", "lsh"):
                raise ValueError(f"unknown attention kind {kind!r}; expected dense or lsh")
        if sorted(self.lengths) != list(self.lengths):
            raise ValueError("lengths must be sorted ascending")


def _dense_forward_only(q, k, v):
    # per-sequence loop: O(l^2) compute per example without batching the
    # [l, l] logits across the whole batch
    outs = []
    for i in range(q.shape[0]):
        outs.append(dense_causal_attention(Tensor(q.data[i:i + 1]), Tensor(k.data[i:i + 1]),
                                           Tensor(v.data[i:i + 1]), exclude_self=True))
    return outs[-1]


def _lsh_forward_only(q, k, v, rotations, chunk_len):
    tables = []
    for rot in rotations:
        proj = q.data @ rot.data
        buckets = np.argmax(np.concatenate([proj, -proj], axis=-1), axis=-1).astype(np.int64)
        tables.append((buckets,) + _round_tables(buckets))
    o, _, _ = _lsh_core_forward(q.data, k.data, v.data, tables, chunk_len,
                                causal=True, scale=True, strict=True, collect_cache=False)
    return o


def bench_attention(spec: BenchSpec, progress=None) -> list[dict]:
    """Time forward-only attention per (kind, length); returns CSV-ready rows
    kind,length,batch,mean_ms,std_ms,median_ms,status."""
    rows = []
    for kind in spec.kinds:
        for l in spec.lengths:
            batch = spec.budget // l
            rng = tc.rng_stream(spec.seed, l)
            q = tc.randn(rng, (batch, l, spec.d_k))
            k, _ = normalize_rows(q)
            v = tc.randn(rng, (batch, l, spec.d_k))
            n_buckets = max(2, (2 * l) // spec.chunk_len)
            if n_buckets % 2:
                n_buckets += 1
            rotations = [sample_rotation(spec.d_k, n_buckets, (spec.seed, l, r))
                         for r in range(spec.n_rounds)]
            row = {"kind": kind, "length": l, "batch": batch,
                   "mean_ms": "", "std_ms": "", "median_ms": "", "status": "ok"}
            try:
                if kind == "dense":
                    run = lambda: _dense_forward_only(q, k, v)  # noqa: E731
                else:
                    run = lambda: _lsh_forward_only(q, k, v, rotations, spec.chunk_len)  # noqa: E731
                for _ in range(spec.warmup):
                    run()
                times = []
                for _ in range(spec.reps):
                    t0 = time.perf_counter()
                    run()
                    times.append((time.perf_counter() - t0) * 1e3)
                row["mean_ms"] = round(statistics.mean(times), 3)
                row["std_ms"] = round(statistics.pstdev(times), 3)
                row["median_ms"] = round(statistics.median(times), 3)
            except MemoryError:
                row["status"] = "oom"
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows


@dataclass(frozen=True)
class MemReportSpec:
    n_layers: tuple = (1, 2, 4, 8)
    modes: tuple = ("reversible", "stored")
    ff_chunks: int = 32
    loss_chunks: int = 8
    batch: int = 4
    length: int = 32
    d_model: int = 32
    d_ff: int = 4096
    n_heads: int = 2
    vocab: int = 64
    seed: int = 0


def mem_report(spec: MemReportSpec, progress=None) -> list[dict]:
    """Peak live activation floats for one forward+backward step per config.

    Parameters and their gradient accumulators are excluded from the count;
    rows are n_l,mode,ff_chunks,peak_floats.
    """
    rows = []
    rng = tc.rng_stream(spec.seed, 1)
    tokens = rng.integers(1, spec.vocab, size=(spec.batch, spec.length))
    mask = np.zeros((spec.batch, spec.length), dtype=bool)
    mask[:, spec.length // 2:-1] = True
    for mode in spec.modes:
        if mode not in ("reversible", "stored"):
            raise ValueError(f"unknown mode {mode!r}; expected reversible or stored")
        for n_l in spec.n_layers:
            cfg = ModelConfig(vocab_size=spec.vocab, d_model=spec.d_model, d_ff=spec.d_ff,
                              n_heads=spec.n_heads, n_layers=n_l, max_len=spec.length,
                              attention="full_shared_qk", ff_chunks=spec.ff_chunks,
                              loss_chunks=spec.loss_chunks)
            model = Model.build(cfg, seed=spec.seed)
            meter = MemMeter()
            _, peak = tc.meter_scope(
                meter, model.loss_and_grads, tokens, mask, None, mode == "stored")
            row = {"n_l": n_l, "mode": mode, "ff_chunks": spec.ff_chunks,
                   "peak_floats": peak}
            rows.append(row)
            if progress is not None:
                progress(row)
    return rows
