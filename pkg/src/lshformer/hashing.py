"""Angular locality-sensitive hashing by random rotation, plus the bucket-sort
machinery that turns hash assignments into an attention batching plan.

A vector x is bucketed as argmax([xR; -xR]) for a random rotation R with
``n_buckets / 2`` columns, so buckets come in antipodal pairs and the rule is
invariant under positive scaling of x.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .tensor import Permutation, Tensor


@dataclass(frozen=True)
class LshConfig:
    """Knobs of bucketed attention: bucket count, hash rounds, chunk length."""

    n_buckets: int
    n_rounds: int = 1
    chunk_len: int | None = None  # None: 2*l/n_buckets at plan-build time
    seed: int = 0

    def __post_init__(self):
        if self.n_buckets <= 0 or self.n_buckets % 2 != 0:
            raise ValueError(f"n_buckets must be even and positive, got {self.n_buckets}")
        if self.n_rounds < 1:
            raise ValueError(f"n_rounds must be >= 1, got {self.n_rounds}")
        if self.chunk_len is not None and self.chunk_len < 1:
            raise ValueError(f"chunk_len must be >= 1, got {self.chunk_len}")

    def resolve_chunk_len(self, length: int) -> int:
        if self.chunk_len is not None:
            return min(self.chunk_len, length)
        return default_chunk_len(length, self.n_buckets)


def default_chunk_len(length: int, n_buckets: int) -> int:
    return max(1, (2 * length) // n_buckets)


@dataclass(frozen=True)
class RoundHash:
    """One hash round: the rotation, its bucket assignment over a sequence,
    and the stable (bucket, position) sort permutation."""

    rotation: Tensor | None
    bucket_ids: np.ndarray
    sort_perm: Permutation
    inverse_perm: Permutation = field(repr=False)

    @property
    def length(self) -> int:
        return int(self.bucket_ids.shape[0])


def sample_rotation(d_k: int, n_buckets: int, seed) -> Tensor:
    """Seed-reproducible i.i.d. standard-normal rotation of shape [d_k, n_buckets/2].

    ``seed`` is an int or a stream tuple (seed, step, round, ...).
    """
    if n_buckets <= 0 or n_buckets % 2 != 0:
        raise ValueError(f"n_buckets must be even and positive, got {n_buckets}")
    if d_k < 1:
        raise ValueError(f"d_k must be >= 1, got {d_k}")
    if isinstance(seed, (tuple, list)):
        rng = tc.rng_stream(seed[0], *seed[1:])
    else:
        rng = tc.rng_stream(int(seed))
    return tc.randn(rng, (d_k, n_buckets // 2))


def hash_vectors(x: Tensor, rotation: Tensor) -> np.ndarray:
    """Bucket ids argmax([xR; -xR]) over the last axis of x; ties go to the
    lowest index (so the all-zero vector lands in bucket 0)."""
    xd = x.data if isinstance(x, Tensor) else np.asarray(x)
    rd = rotation.data if isinstance(rotation, Tensor) else np.asarray(rotation)
    if xd.shape[-1] != rd.shape[0]:
        raise ValueError(f"hash_vectors dim mismatch: x {xd.shape} vs rotation {rd.shape}")
    proj = xd @ rd
    signed = np.concatenate([proj, -proj], axis=-1)
    return np.argmax(signed, axis=-1).astype(np.int64)


def build_round(bucket_ids, length: int | None = None, rotation: Tensor | None = None) -> RoundHash:
    """Sort positions by (bucket, position) and record both permutations."""
    bucket_ids = np.asarray(bucket_ids, dtype=np.int64)
    if bucket_ids.ndim != 1:
        raise ValueError(f"bucket_ids must be 1-D, got shape {bucket_ids.shape}")
    if length is not None and bucket_ids.shape[0] != length:
        raise ValueError(f"bucket_ids length {bucket_ids.shape[0]} != declared length {length}")
    perm = tc.stable_sort_perm(bucket_ids)
    return RoundHash(rotation=rotation, bucket_ids=bucket_ids,
                     sort_perm=perm, inverse_perm=perm.inverse())


def hash_round(x: Tensor, rotation: Tensor) -> RoundHash:
    """Convenience: hash a [l, d_k] sequence and build its round."""
    ids = hash_vectors(x, rotation)
    return build_round(ids, rotation=rotation)


def chunk_neighborhood(si, sj, m: int):
    """True iff sorted rank sj falls in rank si's chunk or the chunk before it
    (chunks of m consecutive sorted positions)."""
    if m < 1:
        raise ValueError(f"chunk length m must be >= 1, got {m}")
    ci = np.asarray(si, dtype=np.int64) // m
    cj = np.asarray(sj, dtype=np.int64) // m
    out = (cj <= ci) & (cj >= ci - 1)
    return bool(out) if out.ndim == 0 else out
