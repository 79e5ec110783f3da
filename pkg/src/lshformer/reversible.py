"""Reversible residual blocks with reconstruction-based backward, plus the
chunked feed-forward and chunked log-prob/loss paths.

A block pairs an attention sublayer F with a feed-forward sublayer G:

    y1 = x1 + F(x2)        x2 = y2 - G(y1)
    y2 = x2 + G(y1)        x1 = y1 - F(x2)

Layer normalization sits inside each sublayer (pre-norm), so F(x) is
attention(LN(x)) and G(x) is feedforward(LN(x)).

Backward comes in two flavors. ``rev_backward`` keeps nothing between blocks:
it reconstructs the inputs from the outputs and recomputes each sublayer's
internals while walking gradients down, so peak activation storage does not
grow with depth. ``rev_forward_cached`` / ``rev_backward_cached`` implement
the conventional stored-activation baseline (every sublayer intermediate kept
for the whole backward) used for gradient-equivalence and memory comparisons.

The feed-forward math is position independent, so it is evaluated in chunks
along the length axis; per-position arithmetic order never changes, which
makes the chunked output bit-identical for every chunk count.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .attention import AttentionParams, multi_head_attention, multi_head_attention_vjp
from .hashing import LshConfig
from .tensor import Tensor

_ACTIVATIONS = {
    "gelu": (tc.gelu, tc.gelu_vjp),
    "relu": (tc.relu, tc.relu_vjp),
}


def _chunk_bounds(length: int, n_chunks: int):
    n_chunks = max(1, min(n_chunks, length))
    size = -(-length // n_chunks)
    return [(lo, min(lo + size, length)) for lo in range(0, length, size)]


@dataclass
class FeedForwardSublayer:
    """Pre-norm position-wise feed-forward: w2 @ act(w1 @ LN(x) + b1) + b2.

    Matmuls go through the row-stable einsum path so per-position results are
    identical no matter how the length axis is chunked.
    """

    gamma: Tensor
    beta: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    activation: str = "gelu"

    def _rows(self, rows: Tensor):
        act, _ = _ACTIVATIONS[self.activation]
        xin = tc.layer_norm(rows, self.gamma, self.beta)
        h = tc.matmul_rowstable(xin, self.w1) + self.b1
        hact = act(h)
        out = tc.matmul_rowstable(hact, self.w2) + self.b2
        return out, (xin, h, hact)

    def value(self, x: Tensor, n_chunks: int = 1) -> Tensor:
        """FF(LN(x)) computed in chunks; intermediates live one chunk at a time."""
        b, l, dm = x.shape
        out = tc.zeros((b, l, dm), dtype=x.dtype)
        for lo, hi in _chunk_bounds(l, n_chunks):
            rows = Tensor(x.data[:, lo:hi].reshape(-1, dm))
            got, _ = self._rows(rows)
            out.data[:, lo:hi] = got.data.reshape(b, hi - lo, dm)
        return out

    def value_with_cache(self, x: Tensor):
        """Unchunked forward keeping every intermediate (stored baseline)."""
        b, l, dm = x.shape
        rows = Tensor(x.data.reshape(-1, dm))
        out, (xin, h, hact) = self._rows(rows)
        return Tensor(out.data.reshape(b, l, dm)), (x, xin, h, hact)

    def _rows_vjp(self, rows: Tensor, dout_rows: Tensor, inner, grads):
        _, act_vjp = _ACTIVATIONS[self.activation]
        xin, h, hact = inner
        dout2 = dout_rows.data.reshape(-1, dout_rows.shape[-1])
        grads["w2"].data += hact.data.T @ dout2
        grads["b2"].data += dout2.sum(axis=0)
        dhact = Tensor(dout2 @ self.w2.data.T)
        dh = act_vjp(h, dhact)
        grads["w1"].data += xin.data.T @ dh.data
        grads["b1"].data += dh.data.sum(axis=0)
        dxin = Tensor(dh.data @ self.w1.data.T)
        dx, dgamma, dbeta = tc.layer_norm_vjp(rows, self.gamma, dxin)
        grads["gamma"].data += dgamma.data
        grads["beta"].data += dbeta.data
        return dx

    def zero_grads(self):
        with tc.unmetered():
            return {name: tc.zeros(getattr(self, name).shape, dtype=getattr(self, name).dtype)
                    for name in ("gamma", "beta", "w1", "b1", "w2", "b2")}

    def vjp_recompute(self, x: Tensor, dy: Tensor, n_chunks: int = 1):
        """Backward that recomputes chunk internals instead of caching them."""
        b, l, dm = x.shape
        grads = self.zero_grads()
        dx = tc.zeros((b, l, dm), dtype=x.dtype)
        for lo, hi in _chunk_bounds(l, n_chunks):
            rows = Tensor(x.data[:, lo:hi].reshape(-1, dm))
            _, inner = self._rows(rows)
            drows = Tensor(dy.data[:, lo:hi].reshape(-1, dm))
            got = self._rows_vjp(rows, drows, inner, grads)
            dx.data[:, lo:hi] = got.data.reshape(b, hi - lo, dm)
        return dx, grads

    def vjp_cached(self, cache, dy: Tensor, n_chunks: int = 1):
        """Backward over stored intermediates; transient work is still chunked."""
        x, xin, h, hact = cache
        b, l, dm = x.shape
        grads = self.zero_grads()
        dx = tc.zeros((b, l, dm), dtype=x.dtype)
        # stored tensors are flat [b*l, .]; select the rows of each length chunk
        for lo, hi in _chunk_bounds(l, n_chunks):
            sel = (slice(None), slice(lo, hi))
            rows = Tensor(x.data[sel].reshape(-1, dm))
            row_idx = _row_index(b, l, lo, hi)
            inner = (Tensor(xin.data[row_idx]), Tensor(h.data[row_idx]), Tensor(hact.data[row_idx]))
            drows = Tensor(dy.data[sel].reshape(-1, dm))
            got = self._rows_vjp(rows, drows, inner, grads)
            dx.data[sel] = got.data.reshape(b, hi - lo, dm)
        return dx, grads


def _row_index(b: int, l: int, lo: int, hi: int):
    base = np.arange(b)[:, None] * l
    return (base + np.arange(lo, hi)[None, :]).reshape(-1)


@dataclass
class AttentionSublayer:
    """Pre-norm multi-head attention sublayer (the F of a reversible block)."""

    gamma: Tensor
    beta: Tensor
    params: AttentionParams
    kind: str = "full"
    lsh_cfg: LshConfig | None = None
    causal: bool = True
    scale: bool = True
    bucket_strict: bool = True

    def _forward(self, x: Tensor, rotations):
        xin = tc.layer_norm(x, self.gamma, self.beta)
        out, att_cache = multi_head_attention(
            xin, self.params, self.kind, lsh_cfg=self.lsh_cfg, rotations=rotations,
            causal=self.causal, scale=self.scale, bucket_strict=self.bucket_strict)
        return out, (x, xin, att_cache)

    def value(self, x: Tensor, rotations=None) -> Tensor:
        out, _ = self._forward(x, rotations)
        return out

    def value_with_cache(self, x: Tensor, rotations=None):
        return self._forward(x, rotations)

    def _vjp(self, cache, dy: Tensor):
        x, xin, att_cache = cache
        dxin, grads = multi_head_attention_vjp(att_cache, dy)
        dx, dgamma, dbeta = tc.layer_norm_vjp(x, self.gamma, dxin)
        grads["gamma"] = dgamma
        grads["beta"] = dbeta
        return dx, grads

    def vjp_cached(self, cache, dy: Tensor):
        return self._vjp(cache, dy)

    def vjp_recompute(self, x: Tensor, dy: Tensor, rotations=None):
        _, cache = self._forward(x, rotations)
        return self._vjp(cache, dy)


@dataclass
class RevBlock:
    """Paired reversible residual layer: F attention, G feed-forward."""

    f: AttentionSublayer
    g: FeedForwardSublayer
    n_chunks: int = 1

    def param_tensors(self):
        out = {}
        for name in ("gamma", "beta"):
            out[f"attn.{name}"] = getattr(self.f, name)
        p = self.f.params
        for name in ("w_qk", "w_q", "w_k", "w_v", "w_o"):
            t = getattr(p, name)
            if t is not None:
                out[f"attn.{name}"] = t
        for name in ("gamma", "beta", "w1", "b1", "w2", "b2"):
            out[f"ff.{name}"] = getattr(self.g, name)
        return out


def chunked_ff(g: FeedForwardSublayer, y1: Tensor, x2: Tensor, n_chunks: int = 1) -> Tensor:
    """x2 + FF(LN(y1)) evaluated chunk by chunk along the length axis.

    Bit-identical for every chunk count; the d_ff-sized intermediate only ever
    holds one chunk's rows. ``n_chunks`` above the length clamps with a warning.
    """
    b, l, dm = y1.shape
    if n_chunks > l:
        warnings.warn(f"n_chunks={n_chunks} exceeds length {l}; clamping", stacklevel=2)
    y2 = tc.zeros((b, l, dm), dtype=y1.dtype)
    for lo, hi in _chunk_bounds(l, n_chunks):
        rows = Tensor(y1.data[:, lo:hi].reshape(-1, dm))
        got, _ = g._rows(rows)
        y2.data[:, lo:hi] = x2.data[:, lo:hi] + got.data.reshape(b, hi - lo, dm)
    return y2


def rev_forward(block: RevBlock, x1: Tensor, x2: Tensor, rotations=None):
    y1 = x1 + block.f.value(x2, rotations)
    y2 = chunked_ff(block.g, y1, x2, block.n_chunks)
    return y1, y2


def rev_reverse(block: RevBlock, y1: Tensor, y2: Tensor, rotations=None):
    x2 = y2 - block.g.value(y1, block.n_chunks)
    x1 = y1 - block.f.value(x2, rotations)
    return x1, x2


def rev_backward(block: RevBlock, y1: Tensor, y2: Tensor, dy1: Tensor, dy2: Tensor,
                 rotations=None):
    """Reconstruct (x1, x2) from the outputs and push gradients through,
    recomputing sublayer internals rather than caching them.

    Returns (x1, x2, dx1, dx2, grads).
    """
    x2 = y2 - block.g.value(y1, block.n_chunks)
    dy1_from_g, g_grads = block.g.vjp_recompute(y1, dy2, block.n_chunks)
    dy1_total = dy1 + dy1_from_g
    x1 = y1 - block.f.value(x2, rotations)
    dx2_from_f, f_grads = block.f.vjp_recompute(x2, dy1_total, rotations)
    dx2 = dy2 + dx2_from_f
    grads = {f"ff.{k}": v for k, v in g_grads.items()}
    grads.update({f"attn.{k}": v for k, v in f_grads.items()})
    return x1, x2, dy1_total, dx2, grads


def rev_forward_cached(block: RevBlock, x1: Tensor, x2: Tensor, rotations=None):
    """Stored-activation forward: keeps both sublayers' internals alive."""
    fy, f_cache = block.f.value_with_cache(x2, rotations)
    y1 = x1 + fy
    gy, g_cache = block.g.value_with_cache(y1)
    y2 = x2 + gy
    return y1, y2, (f_cache, g_cache)


def rev_backward_cached(block: RevBlock, cache, dy1: Tensor, dy2: Tensor):
    f_cache, g_cache = cache
    dy1_from_g, g_grads = block.g.vjp_cached(g_cache, dy2, block.n_chunks)
    dy1_total = dy1 + dy1_from_g
    dx2_from_f, f_grads = block.f.vjp_cached(f_cache, dy1_total)
    dx2 = dy2 + dx2_from_f
    grads = {f"ff.{k}": v for k, v in g_grads.items()}
    grads.update({f"attn.{k}": v for k, v in f_grads.items()})
    return dy1_total, dx2, grads


def chunked_logprob_loss(producer, targets, mask, n_chunks: int = 1):
    """Mean masked cross-entropy over next-token targets, one length-chunk of
    log-probabilities at a time.

    ``producer(lo, hi)`` must return ``(logits, vjp)`` for positions [lo, hi):
    logits of shape [b, hi-lo, vocab] and a vjp mapping d(logits) back to the
    producer's input chunk. The full [b, l, vocab] tensor never exists for
    n_chunks > 1. Returns (loss, dinputs) with dinputs the concatenated vjp
    outputs.
    """
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=bool)
    b, l = targets.shape
    n_masked = int(mask.sum())
    if n_masked == 0:
        raise ValueError("no predictable positions: mask is all zero")
    if n_chunks > l:
        warnings.warn(f"n_chunks={n_chunks} exceeds length {l}; clamping", stacklevel=2)
    loss = 0.0
    dinputs = None
    for lo, hi in _chunk_bounds(l, n_chunks):
        logits, vjp = producer(lo, hi)
        zc = tc.logsumexp(logits, axis=-1)
        tgt = targets[:, lo:hi]
        mc = mask[:, lo:hi]
        picked = np.take_along_axis(logits.data, tgt[..., None], axis=-1)[..., 0]
        loss += float(np.sum((zc.data - picked) * mc))
        p = np.exp(logits.data - zc.data[..., None])
        dlog = p * (mc[..., None] / n_masked)
        rows = np.arange(hi - lo)
        bidx = np.arange(b)[:, None]
        dlog[bidx, rows[None, :], tgt] -= mc / n_masked
        dchunk = vjp(Tensor(dlog.astype(logits.dtype)))
        if dinputs is None:
            dinputs = tc.zeros((b, l) + dchunk.shape[2:], dtype=dchunk.dtype)
        dinputs.data[:, lo:hi] = dchunk.data
    return loss / n_masked, dinputs
