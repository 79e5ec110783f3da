"""Sequence model assembly: embeddings, reversible blocks, chunked loss head,
and a bit-exact checkpoint format.

The reversible stack is fed two copies of the embedded input and its output
pair is averaged before the final layer norm. Attention comes in three kinds:
"full" (separate key projection), "full_shared_qk" (keys are normalized
queries, self attention penalized), and "lsh" (shared-QK bucketed attention;
rotations are resampled per training step from the seed stream).

Checkpoint layout (little-endian throughout):

    bytes 0..3   magic "LSHF"
    bytes 4..7   uint32 format version (currently 1)
    bytes 8..15  uint64 header length in bytes
    header       UTF-8 JSON: config, step, extra metadata, array manifest
    payload      raw array bytes, concatenated in manifest order

Arrays are saved in their native float width, so load(save(state)) == state
bit for bit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .attention import ATTENTION_KINDS, AttentionParams
from .duplication import next_token_targets
from .hashing import LshConfig, sample_rotation
from .reversible import (AttentionSublayer, FeedForwardSublayer, RevBlock,
                         chunked_logprob_loss, rev_backward, rev_backward_cached,
                         rev_forward, rev_forward_cached)
from .tensor import Tensor

CHECKPOINT_MAGIC = b"LSHF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 256
    d_ff: int = 256
    n_heads: int = 4
    n_layers: int = 1
    max_len: int = 1024
    attention: str = "full_shared_qk"
    lsh: LshConfig | None = None
    ff_chunks: int = 1
    loss_chunks: int = 1
    activation: str = "gelu"
    scale_logits: bool = True
    init_scale: float = 0.02

    def __post_init__(self):
        if self.attention not in ATTENTION_KINDS:
            raise ValueError(f"unknown attention kind {self.attention!r}")
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.attention == "lsh" and self.lsh is None:
            raise ValueError("lsh attention requires an LshConfig")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @classmethod
    def duplication_default(cls, vocab_size: int = 128, **overrides) -> "ModelConfig":
        """1-layer model with d_model = d_ff = 256, 4 heads, length 1024."""
        base = dict(vocab_size=vocab_size, d_model=256, d_ff=256, n_heads=4,
                    n_layers=1, max_len=1024)
        base.update(overrides)
        return cls(**base)


def config_to_dict(cfg: ModelConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    if cfg.lsh is not None:
        d["lsh"] = {k: getattr(cfg.lsh, k) for k in cfg.lsh.__dataclass_fields__}
    return d


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    if d.get("lsh") is not None:
        d["lsh"] = LshConfig(**d["lsh"])
    return ModelConfig(**d)


class Model:
    """Parameters plus the block structure viewing them; the optimizer mutates
    parameter arrays in place so views never go stale."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.blocks = _build_blocks(config, params)

    # -- construction ------------------------------------------------------

    @classmethod
    def build(cls, config: ModelConfig, seed: int = 0) -> "Model":
        with tc.unmetered():
            params = _init_params(config, seed)
        return cls(config, params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def make_rotations(self, seed: int, step: int, n_rounds: int | None = None,
                       lsh: LshConfig | None = None):
        """Per-block, per-round rotations from the (seed, step, block, round)
        stream; returns None for non-LSH attention."""
        cfg = self.config
        lsh = lsh or cfg.lsh
        if cfg.attention != "lsh" and lsh is None:
            return None
        rounds = n_rounds or lsh.n_rounds
        return [[sample_rotation(cfg.d_k, lsh.n_buckets, (seed, step, blk, r))
                 for r in range(rounds)]
                for blk in range(cfg.n_layers)]

    # -- forward / backward ------------------------------------------------

    def _embed(self, tokens: np.ndarray) -> Tensor:
        cfg = self.config
        tokens = np.asarray(tokens)
        if tokens.max() >= cfg.vocab_size:
            raise ValueError(f"token id {int(tokens.max())} >= vocab_size {cfg.vocab_size}")
        l = tokens.shape[1]
        if l > cfg.max_len:
            raise ValueError(f"sequence length {l} exceeds configured max {cfg.max_len}")
        return Tensor(self.params["embed"].data[tokens] + self.params["pos"].data[:l])

    def _run_blocks(self, x: Tensor, rotations, attention=None, lsh=None):
        x1, x2 = x, x
        for i, block in enumerate(self.blocks):
            rots = rotations[i] if rotations is not None else None
            with _attention_override(block, attention, lsh):
                x1, x2 = rev_forward(block, x1, x2, rots)
        return x1, x2

    def forward_logits(self, tokens, rotations=None, attention=None,
                       lsh: LshConfig | None = None) -> Tensor:
        """Full [b, l, vocab] logits; logits at p score the token at p+1."""
        x = self._embed(tokens)
        x1, x2 = self._run_blocks(x, rotations, attention, lsh)
        merged = (x1 + x2) * 0.5
        xin = tc.layer_norm(merged, self.params["final.gamma"], self.params["final.beta"])
        return tc.matmul(xin, self.params["head.w"]) + self.params["head.b"]

    def _head_producer(self, merged: Tensor, grads: dict | None, counters: dict | None,
                       targets, mask):
        gamma, beta = self.params["final.gamma"], self.params["final.beta"]
        w, bias = self.params["head.w"], self.params["head.b"]
        b, _l, dm = merged.shape

        def producer(lo, hi):
            h = Tensor(merged.data[:, lo:hi])
            xin = tc.layer_norm(h, gamma, beta)
            flat = xin.data.reshape(-1, dm)
            logits = Tensor((flat @ w.data).reshape(b, hi - lo, -1) + bias.data)
            if counters is not None:
                pred = np.argmax(logits.data, axis=-1)
                mc = mask[:, lo:hi]
                counters["correct"] += int(np.sum((pred == targets[:, lo:hi]) & mc))
                counters["masked"] += int(mc.sum())

            def vjp(dlogits: Tensor) -> Tensor:
                dflat = dlogits.data.reshape(-1, dlogits.shape[-1])
                if grads is not None:
                    grads["head.w"].data += flat.T @ dflat
                    grads["head.b"].data += dflat.sum(axis=0)
                dxin = Tensor((dflat @ w.data.T).reshape(b, hi - lo, dm))
                dh, dgamma, dbeta = tc.layer_norm_vjp(h, gamma, dxin)
                if grads is not None:
                    grads["final.gamma"].data += dgamma.data
                    grads["final.beta"].data += dbeta.data
                return dh

            return logits, vjp

        return producer

    def loss_and_grads(self, tokens, mask, rotations=None, stored: bool = False):
        """One training pass: returns (loss, grads dict, masked accuracy).

        ``stored=False`` uses the reversible backward (activations are
        reconstructed block by block); ``stored=True`` keeps every block's
        cache alive, the conventional baseline.
        """
        cfg = self.config
        tokens = np.asarray(tokens)
        targets = next_token_targets(tokens)
        x = self._embed(tokens)
        x1, x2 = x, x

        caches = []
        for i, block in enumerate(self.blocks):
            rots = rotations[i] if rotations is not None else None
            if stored:
                x1, x2, cache = rev_forward_cached(block, x1, x2, rots)
                caches.append(cache)
            else:
                x1, x2 = rev_forward(block, x1, x2, rots)

        merged = (x1 + x2) * 0.5
        grads = self._zero_grads()
        counters = {"correct": 0, "masked": 0}
        producer = self._head_producer(merged, grads, counters, targets, mask)
        loss, dmerged = chunked_logprob_loss(producer, targets, mask, cfg.loss_chunks)
        accuracy = counters["correct"] / max(counters["masked"], 1)

        dy1 = dmerged * 0.5
        dy2 = dy1
        for i in reversed(range(len(self.blocks))):
            block = self.blocks[i]
            rots = rotations[i] if rotations is not None else None
            if stored:
                dy1, dy2, bgrads = rev_backward_cached(block, caches[i], dy1, dy2)
            else:
                x1, x2, dy1, dy2, bgrads = rev_backward(block, x1, x2, dy1, dy2, rots)
            for k, v in bgrads.items():
                grads[f"block{i}.{k}"].data += v.data

        dx = dy1 + dy2
        l = tokens.shape[1]
        np.add.at(grads["embed"].data, tokens.reshape(-1), dx.data.reshape(-1, cfg.d_model))
        grads["pos"].data[:l] += dx.data.sum(axis=0)
        return loss, grads, accuracy

    def eval_metrics(self, tokens, mask, rotations=None, attention=None,
                     lsh: LshConfig | None = None):
        """(loss, masked accuracy) without gradients, optionally overriding the
        attention kind (used by the train/eval hash-count matrix)."""
        tokens = np.asarray(tokens)
        targets = next_token_targets(tokens)
        x = self._embed(tokens)
        x1, x2 = self._run_blocks(x, rotations, attention, lsh)
        merged = (x1 + x2) * 0.5
        counters = {"correct": 0, "masked": 0}
        producer = self._head_producer(merged, None, counters, targets, mask)
        loss, _ = chunked_logprob_loss(producer, targets, mask, self.config.loss_chunks)
        return loss, counters["correct"] / max(counters["masked"], 1)

    def _zero_grads(self) -> dict[str, Tensor]:
        with tc.unmetered():
            return {k: tc.zeros(v.shape, dtype=v.dtype) for k, v in self.params.items()}

    # -- checkpointing -------------------------------------------------------

    def save_checkpoint(self, path, step: int, extra: dict | None = None,
                        opt_arrays: dict[str, Tensor] | None = None) -> None:
        arrays = dict(self.params)
        if opt_arrays:
            arrays.update(opt_arrays)
        manifest = [{"name": k, "shape": list(v.shape), "dtype": v.data.dtype.str}
                    for k, v in arrays.items()]
        header = {
            "format_version": CHECKPOINT_VERSION,
            "config": config_to_dict(self.config),
            "step": step,
            "extra": extra or {},
            "arrays": manifest,
        }
        blob = json.dumps(header).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(np.array(CHECKPOINT_VERSION, dtype="<u4").tobytes())
            fh.write(np.array(len(blob), dtype="<u8").tobytes())
            fh.write(blob)
            for item in manifest:
                arr = arrays[item["name"]].data
                fh.write(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path):
    """Returns (model, step, extra, opt_arrays)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        version = int(np.frombuffer(fh.read(4), dtype="<u4")[0])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        hlen = int(np.frombuffer(fh.read(8), dtype="<u8")[0])
        header = json.loads(fh.read(hlen).decode("utf-8"))
        arrays = {}
        for item in header["arrays"]:
            dtype = np.dtype(item["dtype"])
            n = int(np.prod(item["shape"])) if item["shape"] else 1
            buf = fh.read(n * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype.newbyteorder("<")).astype(dtype)
            with tc.unmetered():
                arrays[item["name"]] = Tensor(arr.reshape(item["shape"]))
    config = config_from_dict(header["config"])
    params = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
    opt_arrays = {k: v for k, v in arrays.items() if k.startswith("adam.")}
    model = Model(config, params)
    return model, int(header["step"]), header.get("extra", {}), opt_arrays


def predict_accuracy(logits: Tensor, tokens, mask) -> float:
    """Fraction of masked positions where argmax(logits) is the next token."""
    tokens = np.asarray(tokens)
    mask = np.asarray(mask, dtype=bool)
    pred = np.argmax(logits.data if isinstance(logits, Tensor) else np.asarray(logits), axis=-1)
    targets = next_token_targets(tokens)
    if not mask.any():
        raise ValueError("no predictable positions: mask is all zero")
    return float(np.mean(pred[mask] == targets[mask]))


# -- internals ---------------------------------------------------------------


def _init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    rng = tc.rng_stream(seed, 0)
    s = cfg.init_scale
    p: dict[str, Tensor] = {}

    def norm(shape, scale=s):
        return Tensor((rng.standard_normal(shape) * scale).astype(tc.get_default_dtype()))

    p["embed"] = norm((cfg.vocab_size, cfg.d_model))
    p["pos"] = norm((cfg.max_len, cfg.d_model))
    shared = cfg.attention in ("full_shared_qk", "lsh")
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        p[pre + "attn.gamma"] = tc.ones(cfg.d_model)
        p[pre + "attn.beta"] = tc.zeros(cfg.d_model)
        if shared:
            p[pre + "attn.w_qk"] = norm((cfg.d_model, cfg.d_model))
        else:
            p[pre + "attn.w_q"] = norm((cfg.d_model, cfg.d_model))
            p[pre + "attn.w_k"] = norm((cfg.d_model, cfg.d_model))
        p[pre + "attn.w_v"] = norm((cfg.d_model, cfg.d_model))
        p[pre + "attn.w_o"] = norm((cfg.d_model, cfg.d_model))
        p[pre + "ff.gamma"] = tc.ones(cfg.d_model)
        p[pre + "ff.beta"] = tc.zeros(cfg.d_model)
        p[pre + "ff.w1"] = norm((cfg.d_model, cfg.d_ff))
        p[pre + "ff.b1"] = tc.zeros(cfg.d_ff)
        p[pre + "ff.w2"] = norm((cfg.d_ff, cfg.d_model))
        p[pre + "ff.b2"] = tc.zeros(cfg.d_model)
    p["final.gamma"] = tc.ones(cfg.d_model)
    p["final.beta"] = tc.zeros(cfg.d_model)
    p["head.w"] = norm((cfg.d_model, cfg.vocab_size))
    p["head.b"] = tc.zeros(cfg.vocab_size)
    return p


def _build_blocks(cfg: ModelConfig, p: dict[str, Tensor]) -> list[RevBlock]:
    shared = cfg.attention in ("full_shared_qk", "lsh")
    blocks = []
    for i in range(cfg.n_layers):
        pre = f"block{i}."
        att = AttentionParams(
            n_heads=cfg.n_heads, d_k=cfg.d_k, d_v=cfg.d_k,
            w_v=p[pre + "attn.w_v"], w_o=p[pre + "attn.w_o"],
            w_qk=p.get(pre + "attn.w_qk") if shared else None,
            w_q=None if shared else p.get(pre + "attn.w_q"),
            w_k=None if shared else p.get(pre + "attn.w_k"),
        )
        f = AttentionSublayer(gamma=p[pre + "attn.gamma"], beta=p[pre + "attn.beta"],
                              params=att, kind=cfg.attention, lsh_cfg=cfg.lsh,
                              scale=cfg.scale_logits)
        g = FeedForwardSublayer(gamma=p[pre + "ff.gamma"], beta=p[pre + "ff.beta"],
                                w1=p[pre + "ff.w1"], b1=p[pre + "ff.b1"],
                                w2=p[pre + "ff.w2"], b2=p[pre + "ff.b2"],
                                activation=cfg.activation)
        blocks.append(RevBlock(f=f, g=g, n_chunks=cfg.ff_chunks))
    return blocks


class _attention_override:
    """Temporarily swap a block's attention kind (for cross-setting eval).

    Shared-QK parameters are required for every kind this override supports;
    a model trained without shared QK cannot be evaluated under LSH.
    """

    def __init__(self, block: RevBlock, attention: str | None, lsh: LshConfig | None):
        self.block = block
        self.attention = attention
        self.lsh = lsh
        self.saved = None

    def __enter__(self):
        if self.attention is None and self.lsh is None:
            return
        f = self.block.f
        self.saved = (f.kind, f.lsh_cfg)
        if self.attention is not None:
            kind = self.attention
            if f.params.shared_qk and kind == "full":
                kind = "full_shared_qk"  # shared weights have no separate W_K
            if not f.params.shared_qk and kind in ("full_shared_qk", "lsh"):
                raise ValueError(f"cannot evaluate a non-shared-QK model with {kind!r}")
            f.kind = kind
        if self.lsh is not None:
            f.lsh_cfg = self.lsh

    def __exit__(self, *exc):
        if self.saved is not None:
            self.block.f.kind, self.block.f.lsh_cfg = self.saved
        return False
