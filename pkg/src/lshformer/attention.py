"""Attention variants with forward and analytic backward passes.

Four families share one masking convention:

* dense causal attention (optionally with the shared-QK self penalty),
* streaming attention: same outputs as dense, computed one query at a time so
  peak intermediate storage is O(l*d) instead of O(l^2),
* single-round bucketed attention: sort positions by hash bucket, chunk the
  sorted sequence, attend within a chunk and one chunk back,
* multi-round bucketed attention: run several hash rounds and combine their
  outputs with per-round log partition weights, down-weighting pairs that
  co-occur in several rounds by log N so the union is counted exactly once.

Masking is additive on logits: forbidden pairs get -inf, a position's own key
gets a large finite penalty (so a query whose bucket contains nothing else
still normalizes to weight 1 on itself), and duplicated pairs get -log N.
Gradients never flow through bucket assignment (argmax is piecewise constant)
or through the hash rotations; they do flow through key normalization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import tensor as tc
from .hashing import LshConfig, RoundHash, build_round, hash_vectors, sample_rotation
from .tensor import Tensor

SELF_PENALTY = 1e5  # large but finite: lone self-logits still normalize to 1


class MaskKind(Enum):
    FORBIDDEN = "forbidden"
    SELF = "self"
    COUNTED = "counted"


@dataclass(frozen=True)
class MaskCase:
    """Additive logit penalty for one (query, key) pair.

    FORBIDDEN pairs get +inf, a pair of a position with itself gets the large
    finite self penalty, and a pair seen in n hash rounds gets log n.
    """

    kind: MaskKind
    count: int = 1

    def penalty(self) -> float:
        if self.kind is MaskKind.FORBIDDEN:
            return math.inf
        if self.kind is MaskKind.SELF:
            return SELF_PENALTY
        if self.count < 1:
            raise ValueError("COUNTED mask requires count >= 1")
        return math.log(self.count)


@dataclass
class AttentionParams:
    """Per-head projections. In shared-QK mode ``w_qk`` replaces ``w_q`` and
    ``w_k`` and keys are derived from queries by row normalization."""

    n_heads: int
    d_k: int
    d_v: int
    w_v: Tensor
    w_o: Tensor
    w_qk: Tensor | None = None
    w_q: Tensor | None = None
    w_k: Tensor | None = None

    @property
    def shared_qk(self) -> bool:
        return self.w_qk is not None

    def __post_init__(self):
        if self.shared_qk == (self.w_q is not None):
            raise ValueError("provide either w_qk (shared) or w_q/w_k, not both")
        if not self.shared_qk and self.w_k is None:
            raise ValueError("non-shared mode requires w_k")


@dataclass
class AttentionPlan:
    """Materialized batching plan: one RoundHash per hash round plus the chunk
    length; all rounds must cover the same sequence length."""

    rounds: list
    chunk_len: int
    causal: bool = True
    bucket_strict: bool = True

    def __post_init__(self):
        if not self.rounds:
            raise ValueError("plan needs at least one round")
        lengths = {r.length for r in self.rounds}
        if len(lengths) != 1:
            raise ValueError(f"rounds disagree on sequence length: {sorted(lengths)}")
        if self.chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")

    @property
    def length(self) -> int:
        return self.rounds[0].length


def build_plan(q: Tensor, cfg: LshConfig, rotations=None, causal: bool = True,
               bucket_strict: bool = True, seed_stream: tuple | None = None) -> AttentionPlan:
    """Hash a [l, d_k] query sequence once per round and build the plan.

    Rotations are sampled from ``(cfg.seed,) + seed_stream + (round,)`` when
    not supplied, so a fixed stream reproduces the same plan.
    """
    qd = q.data if isinstance(q, Tensor) else np.asarray(q)
    if qd.ndim != 2:
        raise ValueError(f"build_plan expects [l, d_k] queries, got shape {qd.shape}")
    l, d_k = qd.shape
    if rotations is None:
        base = seed_stream or ()
        rotations = [sample_rotation(d_k, cfg.n_buckets, (cfg.seed, *base, r))
                     for r in range(cfg.n_rounds)]
    rounds = [build_round(hash_vectors(Tensor(qd), rot), rotation=rot) for rot in rotations]
    return AttentionPlan(rounds=rounds, chunk_len=cfg.resolve_chunk_len(l),
                         causal=causal, bucket_strict=bucket_strict)


# ---------------------------------------------------------------------------
# dense and streaming attention
# ---------------------------------------------------------------------------


_dense_mask_cache: dict = {}


def _dense_mask(l: int, causal: bool, exclude_self: bool, dtype) -> np.ndarray:
    """Additive [l, l] mask: -inf where forbidden, -SELF_PENALTY on the
    diagonal in shared-QK mode, 0 elsewhere. Cached per shape."""
    key = (l, causal, exclude_self, np.dtype(dtype).str)
    got = _dense_mask_cache.get(key)
    if got is None:
        idx = np.arange(l)
        got = np.zeros((l, l), dtype=dtype)
        if causal:
            got[idx[None, :] > idx[:, None]] = -np.inf
        if exclude_self:
            np.fill_diagonal(got, -SELF_PENALTY)
        _dense_mask_cache[key] = got
    return got


def _dense_forward(q, k, v, scale, causal, exclude_self):
    qd, kd, vd = q.data, k.data, v.data
    l = qd.shape[-2]
    alpha = 1.0 / math.sqrt(qd.shape[-1]) if scale else 1.0
    if l == 0:
        empty = np.zeros(qd.shape[:-1] + (vd.shape[-1],), dtype=qd.dtype)
        return Tensor(empty), None
    buf = np.matmul(qd, np.swapaxes(kd, -1, -2))
    if scale:
        buf *= alpha
    buf += _dense_mask(l, causal, exclude_self, qd.dtype)
    # every query keeps at least its own (possibly penalized) key: z is finite
    mx = np.max(buf, axis=-1, keepdims=True)
    buf -= mx
    np.exp(buf, out=buf)
    denom = np.sum(buf, axis=-1, keepdims=True)
    z = tc.Tensor((mx + np.log(denom))[..., 0])
    buf /= denom
    p = tc.Tensor(buf)
    o = tc.matmul(p, v)
    cache = (q, k, v, p, z, alpha)
    return o, cache


def dense_causal_attention(q: Tensor, k: Tensor, v: Tensor, scale: bool = True,
                           exclude_self: bool = False) -> Tensor:
    """softmax(q k^T [/ sqrt(d_k)]) v with lower-triangular masking.

    ``exclude_self`` applies the shared-QK self penalty; a position whose only
    allowed key is itself (position 0) then still attends to itself.
    """
    o, _ = _dense_forward(q, k, v, scale, causal=True, exclude_self=exclude_self)
    return o


def dense_causal_attention_with_cache(q, k, v, scale=True, exclude_self=False):
    return _dense_forward(q, k, v, scale, causal=True, exclude_self=exclude_self)


def dense_attention_vjp(cache, do: Tensor, dz: Tensor | None = None):
    """Backward of the dense path; returns (dq, dk, dv)."""
    q, k, v, p, z, alpha = cache
    dv = tc.matmul(tc.swap_last(p), do)
    dp = tc.matmul(do, tc.swap_last(v))
    rowdot = np.sum(dp.data * p.data, axis=-1, keepdims=True)
    dlog = dp.data - rowdot
    if dz is not None:
        dlog = dlog + dz.data[..., None]
    dlogits = tc.Tensor(p.data * dlog)
    dq = tc.Tensor(np.matmul(dlogits.data, k.data) * alpha)
    dk = tc.Tensor(np.matmul(np.swapaxes(dlogits.data, -1, -2), q.data) * alpha)
    return dq, dk, dv


def streaming_attention(q: Tensor, k: Tensor, v: Tensor, scale: bool = True,
                        exclude_self: bool = False) -> Tensor:
    """Same values as dense_causal_attention, computed per query so no l x l
    logit matrix is ever materialized."""
    qd, kd, vd = q.data, k.data, v.data
    l = qd.shape[-2]
    alpha = 1.0 / math.sqrt(qd.shape[-1]) if scale else 1.0
    out = tc.zeros(qd.shape[:-1] + (vd.shape[-1],), dtype=qd.dtype)
    for i in range(l):
        row = np.matmul(kd[..., : i + 1, :], qd[..., i, :][..., None])[..., 0] * alpha
        if exclude_self:
            row[..., i] = row[..., i] - SELF_PENALTY
        m = np.max(row, axis=-1, keepdims=True)
        w = np.exp(row - m)
        w /= np.sum(w, axis=-1, keepdims=True)
        out.data[..., i, :] = np.matmul(w[..., None, :], vd[..., : i + 1, :])[..., 0, :]
    return out


def streaming_attention_vjp(q, k, v, do, scale=True, exclude_self=False):
    """Backward of the streaming path, recomputing each query's weights."""
    qd, kd, vd, dod = q.data, k.data, v.data, do.data
    l = qd.shape[-2]
    alpha = 1.0 / math.sqrt(qd.shape[-1]) if scale else 1.0
    dq = np.zeros_like(qd)
    dk = np.zeros_like(kd)
    dv = np.zeros_like(vd)
    for i in range(l):
        row = np.matmul(kd[..., : i + 1, :], qd[..., i, :][..., None])[..., 0] * alpha
        if exclude_self:
            row[..., i] = row[..., i] - SELF_PENALTY
        m = np.max(row, axis=-1, keepdims=True)
        w = np.exp(row - m)
        w /= np.sum(w, axis=-1, keepdims=True)
        g = dod[..., i, :]
        dv[..., : i + 1, :] += w[..., :, None] * g[..., None, :]
        dw = np.matmul(vd[..., : i + 1, :], g[..., None])[..., 0]
        drow = w * (dw - np.sum(dw * w, axis=-1, keepdims=True))
        dq[..., i, :] += np.matmul(drow[..., None, :], kd[..., : i + 1, :])[..., 0, :] * alpha
        dk[..., : i + 1, :] += drow[..., :, None] * qd[..., i, :][..., None, :] * alpha
    return Tensor(dq), Tensor(dk), Tensor(dv)


# ---------------------------------------------------------------------------
# shared-QK preparation
# ---------------------------------------------------------------------------


def normalize_rows(q: Tensor):
    """L2-normalize the last axis; all-zero rows stay zero."""
    qd = q.data
    norm = np.sqrt(np.sum(qd * qd, axis=-1, keepdims=True))
    safe = np.where(norm > 0, norm, 1.0)
    return Tensor(qd / safe), (qd, norm, safe)


def normalize_rows_vjp(cache, dk: Tensor) -> Tensor:
    qd, norm, safe = cache
    khat = qd / safe
    dkd = dk.data
    proj = np.sum(dkd * khat, axis=-1, keepdims=True)
    dq = (dkd - proj * khat) / safe
    return Tensor(np.where(norm > 0, dq, 0.0))


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, l, dm = x.shape
    d = dm // n_heads
    return Tensor(np.ascontiguousarray(
        x.data.reshape(b, l, n_heads, d).transpose(0, 2, 1, 3)))


def merge_heads(x: Tensor) -> Tensor:
    b, h, l, d = x.shape
    return Tensor(np.ascontiguousarray(x.data.transpose(0, 2, 1, 3)).reshape(b, l, h * d))


def shared_qk_prepare(a: Tensor, params: AttentionParams):
    """Project activations to per-head (Q, K, V) with K the row-normalized Q."""
    if not params.shared_qk:
        raise ValueError("shared_qk_prepare requires shared-QK params")
    q = split_heads(tc.matmul(a, params.w_qk), params.n_heads)
    k, _ = normalize_rows(q)
    v = split_heads(tc.matmul(a, params.w_v), params.n_heads)
    return q, k, v


# ---------------------------------------------------------------------------
# bucketed (LSH) attention core, batched over leading axis B
# ---------------------------------------------------------------------------


def _round_tables(buckets: np.ndarray):
    """buckets [B, l] -> (perm [B, l] rank->orig, srank [B, l] orig->rank);
    stable sort gives bucket-major, position-minor order."""
    perm = np.argsort(buckets, axis=-1, kind="stable").astype(np.int64)
    srank = np.empty_like(perm)
    np.put_along_axis(srank, perm, np.arange(perm.shape[-1], dtype=np.int64)[None, :], axis=-1)
    return perm, srank


def _btake(table: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """table [B, n], idx [B, ...] -> table[b, idx[b, ...]] via one flat gather."""
    B, n = table.shape
    off = (np.arange(B, dtype=np.int64) * n).reshape((B,) + (1,) * (idx.ndim - 1))
    return table.reshape(-1)[idx + off]


def _take_rows(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """x [B, l, d], idx [B, r] -> [B, r, d]."""
    B, l, d = x.shape
    off = (np.arange(B, dtype=np.int64) * l)[:, None]
    return x.reshape(B * l, d)[idx + off]


def _pad_rows(x: np.ndarray, pad: int):
    if pad == 0:
        return x
    width = [(0, 0)] * x.ndim
    width[1] = (0, pad)
    return np.pad(x, width)


_static_grid_cache: dict = {}


def _static_grids(nc: int, m: int, dtype):
    """Data-independent grid masks: the self penalty (key slot j == m + query
    slot i lands on the query's own sorted slot) and the first chunk's missing
    predecessor."""
    key = (nc, m, np.dtype(dtype).str)
    got = _static_grid_cache.get(key)
    if got is None:
        i = np.arange(m)
        j = np.arange(2 * m)
        is_self = j[None, :] == (m + i[:, None])  # [m, 2m]
        self_pen = (is_self * SELF_PENALTY).astype(dtype)
        prev_invalid = np.zeros((nc, 1, 2 * m), dtype=bool)
        prev_invalid[0, :, :m] = True  # no chunk precedes the first: no wraparound
        got = (is_self, self_pen, prev_invalid)
        _static_grid_cache[key] = got
    return got


def _window_cat(xc: np.ndarray) -> np.ndarray:
    """[B, nc, m, ...] -> [B, nc, 2m, ...]: each chunk prefixed by the one
    before; the first chunk's missing predecessor slots are zeroed (they are
    masked out regardless)."""
    B, nc, m = xc.shape[:3]
    out = np.empty((B, nc, 2 * m) + xc.shape[3:], dtype=xc.dtype)
    out[:, :, m:] = xc
    out[:, 1:, :m] = xc[:, :-1]
    out[:, 0, :m] = 0
    return out


def _lsh_core_forward(q, k, v, rounds, m, causal, scale, strict, collect_cache):
    """q,k [B,l,dk], v [B,l,dv] raw arrays; rounds: list of (buckets, perm, srank).

    Returns (o [B,l,dv], z_union [B,l], cache). Every query keeps its own key
    with the finite self penalty, so no attention set is ever empty.
    """
    B, l, dk = q.shape
    dv = v.shape[-1]
    R = len(rounds)
    alpha = 1.0 / math.sqrt(dk) if scale else 1.0
    nc = -(-l // m)
    L = nc * m
    pad = L - l
    multi = R > 1
    is_self, self_pen, prev_invalid = _static_grids(nc, m, q.dtype)

    codes = [_pair_codes(buckets, srank, m, nc, strict)
             for buckets, _perm, srank in rounds] if multi else None
    z_rounds = np.empty((R, B, l), dtype=q.dtype)
    o_rounds = np.empty((R, B, l, dv), dtype=q.dtype)
    caches = []

    for r, (buckets, perm, srank) in enumerate(rounds):
        qc = _pad_rows(_take_rows(q, perm), pad).reshape(B, nc, m, dk)
        kcat = _window_cat(_pad_rows(_take_rows(k, perm), pad).reshape(B, nc, m, dk))
        vcat = _window_cat(_pad_rows(_take_rows(v, perm), pad).reshape(B, nc, m, dv))
        posq = _pad_rows(perm, pad).reshape(B, nc, m)
        if pad:
            posq = posq.copy()
            posq.reshape(B, L)[:, l:] = l  # sentinel: never a valid key
        posk = _window_cat(posq)

        bad = np.broadcast_to(posk[:, :, None, :] >= l, (B, nc, m, 2 * m)).copy()
        if causal:
            bad |= posk[:, :, None, :] > posq[:, :, :, None]
        if strict:
            bktq = _pad_rows(_btake(buckets, np.minimum(perm, l - 1)), pad).reshape(B, nc, m)
            if pad:
                bktq.reshape(B, L)[:, l:] = -1  # pads never bucket-match
            bktk = _window_cat(bktq)
            bad |= bktk[:, :, None, :] != bktq[:, :, :, None]
        bad |= prev_invalid[None]

        logits = np.matmul(qc, np.swapaxes(kcat, -1, -2))
        if scale:
            logits *= alpha
        logits -= self_pen  # finite penalty on each query's own slot
        if multi:
            n_pair = _pair_round_counts(codes, r, posq, posk, l)
            logn = np.log(n_pair, dtype=q.dtype)
            logn[..., is_self] = 0.0  # self slots take only the penalty term
            logits -= logn
        np.copyto(logits, -np.inf, where=bad)

        mx = np.max(logits, axis=-1, keepdims=True)
        if pad:
            np.copyto(mx, 0.0, where=~np.isfinite(mx))  # only padded query rows
        logits -= mx
        np.exp(logits, out=logits)
        denom = np.sum(logits, axis=-1, keepdims=True)
        if pad:
            good = denom > 0
            zc = np.where(good, mx + np.log(np.where(good, denom, 1.0)), -np.inf)[..., 0]
            logits /= np.where(good, denom, 1.0)
        else:
            zc = (mx + np.log(denom))[..., 0]
            logits /= denom
        p = logits
        oc = np.matmul(p, vcat)

        o_rounds[r] = _take_rows(oc.reshape(B, L, dv), srank)
        z_rounds[r] = _btake(zc.reshape(B, L), srank)
        if collect_cache:
            caches.append((p, perm, srank))

    if R == 1:
        o, z_union = o_rounds[0], z_rounds[0]
        w = None
    else:
        zmax = np.max(z_rounds, axis=0)
        z_union = zmax + np.log(np.sum(np.exp(z_rounds - zmax), axis=0))
        w = np.exp(z_rounds - z_union)
        o = np.einsum("rbl,rbld->bld", w, o_rounds)

    cache = None
    if collect_cache:
        cache = dict(q=q, k=k, v=v, rounds=rounds, m=m, causal=causal, scale=scale,
                     strict=strict, caches=caches, o_rounds=o_rounds, z_rounds=z_rounds,
                     w=w, o=o, alpha=alpha, nc=nc, L=L, pad=pad)
    return o, z_union, cache


def _pair_codes(buckets, srank, m, nc, strict):
    """Per-position membership code: pair (i, j) is bucket-equal and
    chunk-reachable in a round iff 0 <= code[i] - code[j] <= 1."""
    chunk = srank // m
    code = buckets * (nc + 1) + chunk if strict else chunk
    return code.astype(np.int32, copy=False)


def _pair_round_counts(codes, r, posq, posk, l):
    """Count, per grid cell of round r, the rounds whose pair set contains the
    (query, key) original-position pair. A surviving cell is a member of its
    own round by construction, so that round is skipped and counted as 1;
    non-surviving cells get garbage counts but are masked out by the caller.
    Pads clamp to index 0 and are likewise masked."""
    qi = np.minimum(posq, l - 1)
    kj = np.minimum(posk, l - 1)
    n = np.ones(posq.shape[:3] + (posk.shape[-1],), dtype=np.uint8)
    for rp, code in enumerate(codes):
        if rp == r:
            continue
        diff = _btake(code, qi)[:, :, :, None] - _btake(code, kj)[:, :, None, :]
        n += diff.astype(np.uint32, copy=False) <= 1  # negatives wrap to huge
    return n


def _lsh_core_vjp(cache, do, dz=None):
    """Backward of the core; treats bucket assignment and N counts as constants."""
    q, k, v = cache["q"], cache["k"], cache["v"]
    rounds, m, alpha = cache["rounds"], cache["m"], cache["alpha"]
    nc, L, pad = cache["nc"], cache["L"], cache["pad"]
    B, l, dk = q.shape
    dv_dim = v.shape[-1]
    R = len(rounds)
    w, o_rounds, o = cache["w"], cache["o_rounds"], cache["o"]

    dq = np.zeros_like(q)
    dk_acc = np.zeros_like(k)
    dv_acc = np.zeros_like(v)

    for r in range(R):
        p, perm, srank = cache["caches"][r]
        if R == 1:
            do_r = do
            dz_r = np.zeros((B, l), dtype=q.dtype) if dz is None else dz
        else:
            wr = w[r][:, :, None]
            do_r = do * wr
            dz_r = np.sum(do * (o_rounds[r] - o), axis=-1) * w[r]
            if dz is not None:
                dz_r = dz_r + dz * w[r]

        qs = _pad_rows(_take_rows(q, perm), pad).reshape(B, nc, m, dk)
        kcat = _window_cat(_pad_rows(_take_rows(k, perm), pad).reshape(B, nc, m, dk))
        vcat = _window_cat(_pad_rows(_take_rows(v, perm), pad).reshape(B, nc, m, dv_dim))

        dor = _pad_rows(_take_rows(do_r, perm), pad).reshape(B, nc, m, dv_dim)
        dzr = _pad_rows(_btake(dz_r, perm), pad).reshape(B, nc, m)

        pt = np.swapaxes(p, -1, -2)
        dvcat = np.matmul(pt, dor)
        dp = np.matmul(dor, np.swapaxes(vcat, -1, -2))
        rowdot = np.sum(dp * p, axis=-1, keepdims=True)
        dlogits = p * (dp - rowdot + dzr[..., None])

        dqc = np.matmul(dlogits, kcat)
        dkcat = np.matmul(np.swapaxes(dlogits, -1, -2), qs)
        if alpha != 1.0:
            dqc *= alpha
            dkcat *= alpha

        dks = dkcat[:, :, m:, :] + np.roll(dkcat[:, :, :m, :], -1, axis=1)
        dvs = dvcat[:, :, m:, :] + np.roll(dvcat[:, :, :m, :], -1, axis=1)

        dq += _take_rows(dqc.reshape(B, L, -1), srank)
        dk_acc += _take_rows(dks.reshape(B, L, -1), srank)
        dv_acc += _take_rows(dvs.reshape(B, L, -1), srank)

    return dq, dk_acc, dv_acc


def _tables_from_round(rh: RoundHash, B: int):
    buckets = np.broadcast_to(rh.bucket_ids[None, :], (B, rh.length)).copy()
    perm = np.broadcast_to(rh.sort_perm.indices[None, :], (B, rh.length)).copy()
    srank = np.broadcast_to(rh.inverse_perm.indices[None, :], (B, rh.length)).copy()
    return buckets, perm, srank


def _as_batched(x: Tensor):
    if x.ndim == 2:
        return x.data[None, :, :], True
    if x.ndim == 3:
        return x.data, False
    raise ValueError(f"expected [l, d] or [b, l, d], got shape {x.shape}")


def lsh_attention_round(q: Tensor, k: Tensor, v: Tensor, round_hash: RoundHash,
                        chunk_len: int, causal: bool = True, scale: bool = True,
                        bucket_strict: bool = True):
    """One hash round of bucketed attention.

    Returns (o, z): the per-position outputs scattered back to original order
    and the per-position log partition over the surviving logits.
    """
    qd, squeeze = _as_batched(q)
    kd, _ = _as_batched(k)
    vd, _ = _as_batched(v)
    tables = [_tables_from_round(round_hash, qd.shape[0])]
    o, z, _ = _lsh_core_forward(qd, kd, vd, tables, chunk_len, causal, scale,
                                bucket_strict, collect_cache=False)
    if squeeze:
        return Tensor(o[0]), Tensor(z[0])
    return Tensor(o), Tensor(z)


def multi_round_lsh_attention(q: Tensor, k: Tensor, v: Tensor, plan: AttentionPlan,
                              scale: bool = True) -> Tensor:
    """Combine all hash rounds of ``plan`` into one attention output."""
    o, _, _ = _multi_round_forward(q, k, v, plan, scale, collect_cache=False)
    return o


def multi_round_lsh_attention_with_cache(q, k, v, plan: AttentionPlan, scale=True):
    o, _z, cache = _multi_round_forward(q, k, v, plan, scale, collect_cache=True)
    return o, cache


def _multi_round_forward(q, k, v, plan, scale, collect_cache):
    qd, squeeze = _as_batched(q)
    kd, _ = _as_batched(k)
    vd, _ = _as_batched(v)
    B = qd.shape[0]
    tables = []
    for rh in plan.rounds:
        tables.append(_tables_from_round(rh, B))
    o, z, cache = _lsh_core_forward(qd, kd, vd, tables, plan.chunk_len, plan.causal,
                                    scale, plan.bucket_strict, collect_cache)
    if cache is not None:
        cache["squeeze"] = squeeze
    if squeeze:
        return Tensor(o[0]), Tensor(z[0]), cache
    return Tensor(o), Tensor(z), cache


def multi_round_lsh_attention_vjp(cache, do: Tensor, dz: Tensor | None = None):
    dod = do.data[None, ...] if cache["squeeze"] else do.data
    dzd = None if dz is None else (dz.data[None, ...] if cache["squeeze"] else dz.data)
    dq, dk, dv = _lsh_core_vjp(cache, dod, dzd)
    if cache["squeeze"]:
        return Tensor(dq[0]), Tensor(dk[0]), Tensor(dv[0])
    return Tensor(dq), Tensor(dk), Tensor(dv)


# ---------------------------------------------------------------------------
# multi-head wrapper
# ---------------------------------------------------------------------------

ATTENTION_KINDS = ("full", "full_shared_qk", "lsh")


def multi_head_attention(a: Tensor, params: AttentionParams, kind: str, *,
                         lsh_cfg: LshConfig | None = None, rotations=None,
                         causal: bool = True, scale: bool = True,
                         bucket_strict: bool = True):
    """Project, attend per head, concatenate, project back.

    ``kind`` selects dense attention ("full"), dense shared-QK attention with
    the self penalty ("full_shared_qk"), or bucketed attention ("lsh", which
    requires ``lsh_cfg`` and one rotation per round). Returns (out, cache).
    """
    if kind not in ATTENTION_KINDS:
        raise ValueError(f"unknown attention kind {kind!r}; expected one of {ATTENTION_KINDS}")
    b, l, dm = a.shape
    nh = params.n_heads
    if dm % nh != 0:
        raise ValueError(f"d_model {dm} not divisible into {nh} heads")

    cache: dict = {"kind": kind, "a": a, "params": params, "causal": causal, "scale": scale}
    if params.shared_qk:
        qflat = tc.matmul(a, params.w_qk)
        q = split_heads(qflat, nh)
        k, norm_cache = normalize_rows(q)
        cache["norm_cache"] = norm_cache
    else:
        if kind == "lsh":
            raise ValueError("lsh attention requires shared-QK parameters")
        q = split_heads(tc.matmul(a, params.w_q), nh)
        k = split_heads(tc.matmul(a, params.w_k), nh)
    vproj = tc.matmul(a, params.w_v)
    v = split_heads(vproj, nh)
    cache.update(q=q, k=k, v=v)

    if kind == "full":
        ctx, att_cache = dense_causal_attention_with_cache(q, k, v, scale=scale)
        cache["att_cache"] = att_cache
    elif kind == "full_shared_qk":
        ctx, att_cache = dense_causal_attention_with_cache(q, k, v, scale=scale, exclude_self=True)
        cache["att_cache"] = att_cache
    else:
        if lsh_cfg is None or rotations is None:
            raise ValueError("lsh attention needs lsh_cfg and rotations")
        m = lsh_cfg.resolve_chunk_len(l)
        B = b * nh
        qf = q.data.reshape(B, l, -1)
        kf = k.data.reshape(B, l, -1)
        vf = v.data.reshape(B, l, -1)
        tables = []
        for rot in rotations:
            buckets = hash_vectors(q, rot).reshape(B, l)
            perm, srank = _round_tables(buckets)
            tables.append((buckets, perm, srank))
        of, _z, att_cache = _lsh_core_forward(qf, kf, vf, tables, m, causal, scale,
                                              bucket_strict, collect_cache=True)
        ctx = Tensor(of.reshape(b, nh, l, -1))
        cache["att_cache"] = att_cache
    merged = merge_heads(ctx)
    out = tc.matmul(merged, params.w_o)
    cache["merged"] = merged
    return out, cache


def multi_head_attention_vjp(cache, dout: Tensor):
    """Backward of multi_head_attention; returns (da, grads dict)."""
    params: AttentionParams = cache["params"]
    a, q, k, v = cache["a"], cache["q"], cache["k"], cache["v"]
    b, l, dm = a.shape
    nh = params.n_heads

    grads: dict[str, Tensor] = {}
    grads["w_o"] = Tensor(np.matmul(
        cache["merged"].data.reshape(-1, cache["merged"].shape[-1]).T,
        dout.data.reshape(-1, dm)))
    dmerged = tc.matmul(dout, tc.swap_last(params.w_o))
    dctx = Tensor(np.ascontiguousarray(
        dmerged.data.reshape(b, l, nh, -1).transpose(0, 2, 1, 3)))

    kind = cache["kind"]
    if kind in ("full", "full_shared_qk"):
        dq, dk, dv = dense_attention_vjp(cache["att_cache"], dctx)
    else:
        B = b * nh
        dqf, dkf, dvf = _lsh_core_vjp(cache["att_cache"], dctx.data.reshape(B, l, -1))
        dq = Tensor(dqf.reshape(b, nh, l, -1))
        dk = Tensor(dkf.reshape(b, nh, l, -1))
        dv = Tensor(dvf.reshape(b, nh, l, -1))

    if params.shared_qk:
        dq = dq + normalize_rows_vjp(cache["norm_cache"], dk)
        dqflat = merge_heads(dq)
        grads["w_qk"] = Tensor(np.matmul(a.data.reshape(-1, dm).T,
                                         dqflat.data.reshape(-1, dqflat.shape[-1])))
        da = tc.matmul(dqflat, tc.swap_last(params.w_qk))
    else:
        dqflat = merge_heads(dq)
        dkflat = merge_heads(dk)
        grads["w_q"] = Tensor(np.matmul(a.data.reshape(-1, dm).T,
                                        dqflat.data.reshape(-1, dqflat.shape[-1])))
        grads["w_k"] = Tensor(np.matmul(a.data.reshape(-1, dm).T,
                                        dkflat.data.reshape(-1, dkflat.shape[-1])))
        da = tc.matmul(dqflat, tc.swap_last(params.w_q)) + tc.matmul(dkflat, tc.swap_last(params.w_k))
    dvflat = merge_heads(dv)
    grads["w_v"] = Tensor(np.matmul(a.data.reshape(-1, dm).T,
                                    dvflat.data.reshape(-1, dvflat.shape[-1])))
    da = da + tc.matmul(dvflat, tc.swap_last(params.w_v))
    return da, grads
