"""Bucketed (LSH) attention, reversible residual blocks, and a chunked
training/benchmark harness, all on a minimal metered tensor substrate."""

__version__ = "0.1.0"

from .attention import (AttentionParams, AttentionPlan, build_plan,
                        dense_causal_attention, lsh_attention_round,
                        multi_round_lsh_attention, shared_qk_prepare,
                        streaming_attention)
from .duplication import DupConfig, copy_oracle, gen_batch
from .hashing import LshConfig, RoundHash, build_round, chunk_neighborhood, hash_vectors, sample_rotation
from .model import Model, ModelConfig, load_checkpoint, predict_accuracy
from .reversible import (AttentionSublayer, FeedForwardSublayer, RevBlock, chunked_ff,
                         chunked_logprob_loss, rev_backward, rev_forward, rev_reverse)
from .tensor import MemMeter, Permutation, Tensor, default_dtype, meter_scope
from .trainer import TrainConfig, adam_step, eval_matrix, evaluate, make_preset, train

__all__ = [
    "AttentionParams", "AttentionPlan", "AttentionSublayer", "DupConfig",
    "FeedForwardSublayer", "LshConfig", "MemMeter", "Model", "ModelConfig",
    "Permutation", "RevBlock", "RoundHash", "Tensor", "TrainConfig",
    "adam_step", "build_plan", "build_round", "chunk_neighborhood", "chunked_ff",
    "chunked_logprob_loss", "copy_oracle", "default_dtype", "dense_causal_attention",
    "eval_matrix", "evaluate", "gen_batch", "hash_vectors", "load_checkpoint",
    "lsh_attention_round", "make_preset", "meter_scope", "multi_round_lsh_attention",
    "predict_accuracy", "rev_backward", "rev_forward", "rev_reverse",
    "sample_rotation", "shared_qk_prepare", "streaming_attention", "train",
]
