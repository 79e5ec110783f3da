"""Training loop, Adam optimizer, metric logging, and the train/eval
hash-count accuracy matrix on the duplication task.

Evaluation "settings" name an attention configuration: "full" is dense
shared-QK attention, "lsh-N" is bucketed attention with N hash rounds. A
model trained in one setting can be evaluated under any other because all
settings share the same parameters.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tc
from .duplication import EVAL_STREAM_OFFSET, DupConfig, gen_batch
from .hashing import LshConfig
from .model import Model, ModelConfig
from .tensor import Tensor


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    dup: DupConfig
    steps: int = 20_000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip: float = 1.0
    log_every: int = 50
    eval_every: int = 0  # 0: evaluate only at the end
    eval_batches: int = 20
    eval_hash_counts: tuple = (1, 2, 4, 8)
    seed: int = 0
    early_stop_acc: float | None = None
    early_stop_patience: int = 3

    def __post_init__(self):
        if self.batch_size < 1 or self.steps < 1:
            raise ValueError("batch_size and steps must be >= 1")
        if self.model.vocab_size != self.dup.vocab_size:
            raise ValueError(
                f"model vocab {self.model.vocab_size} != task vocab {self.dup.vocab_size}")

    @property
    def setting(self) -> str:
        return setting_name(self.model)


def setting_name(model_cfg: ModelConfig) -> str:
    if model_cfg.attention == "lsh":
        return f"lsh-{model_cfg.lsh.n_rounds}"
    return "full"


@dataclass
class MetricRecord:
    step: int
    split: str
    setting: str
    loss: float
    accuracy: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "split": self.split, "setting": self.setting,
                           "loss": self.loss, "accuracy": self.accuracy})


@dataclass
class AdamState:
    m: dict[str, Tensor]
    v: dict[str, Tensor]
    t: int = 0
    skipped: int = 0

    @classmethod
    def for_model(cls, model: Model) -> "AdamState":
        with tc.unmetered():
            m = {k: tc.zeros(p.shape, dtype=p.dtype) for k, p in model.params.items()}
            v = {k: tc.zeros(p.shape, dtype=p.dtype) for k, p in model.params.items()}
        return cls(m=m, v=v)

    def arrays(self) -> dict[str, Tensor]:
        out = {f"adam.m.{k}": t for k, t in self.m.items()}
        out.update({f"adam.v.{k}": t for k, t in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, Tensor], t: int, skipped: int = 0) -> "AdamState":
        m = {k[len("adam.m."):]: v for k, v in arrays.items() if k.startswith("adam.m.")}
        v = {k[len("adam.v."):]: a for k, a in arrays.items() if k.startswith("adam.v.")}
        return cls(m=m, v=v, t=t, skipped=skipped)


def global_grad_norm(grads: dict[str, Tensor]) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(g.data.astype(np.float64) ** 2))
    return math.sqrt(total)


def adam_step(params: dict[str, Tensor], grads: dict[str, Tensor], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              clip: float = 0.0) -> bool:
    """Bias-corrected adaptive-moment update with global-norm clipping,
    in place on the parameter arrays. Non-finite gradients skip the update
    (moments and step count untouched); returns False in that case.
    """
    norm = global_grad_norm(grads)
    if not math.isfinite(norm):
        state.skipped += 1
        return False
    scale = clip / norm if clip > 0 and norm > clip else 1.0
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k].data * scale if scale != 1.0 else grads[k].data
        m = state.m[k].data
        v = state.v[k].data
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return True


def lr_at(cfg: TrainConfig, step: int) -> float:
    if cfg.warmup > 0 and step < cfg.warmup:
        return cfg.lr * (step + 1) / cfg.warmup
    return cfg.lr


@dataclass
class TrainResult:
    model: Model
    opt: AdamState
    records: list
    steps_run: int
    aborted: bool = False
    abort_reason: str | None = None


def train(cfg: TrainConfig, metrics_stream=None, on_record=None,
          model: Model | None = None, opt: AdamState | None = None,
          start_step: int = 0) -> TrainResult:
    """Run the optimization loop; emits MetricRecords and returns final state.

    Training data, hash rotations, and evaluation batches are all derived
    from counter-based streams of (cfg.seed, step), so a fixed config gives a
    bit-identical metric stream on one platform; pass ``model``/``opt``/
    ``start_step`` to resume from a checkpoint.
    """
    if model is None:
        model = Model.build(cfg.model, seed=cfg.seed)
    if opt is None:
        opt = AdamState.for_model(model)
    records: list[MetricRecord] = []

    def emit(rec: MetricRecord):
        records.append(rec)
        if metrics_stream is not None:
            metrics_stream.write(rec.to_json() + "\n")
        if on_record is not None:
            on_record(rec)

    streak = 0
    aborted = False
    reason = None
    last = (float("nan"), float("nan"))
    step = start_step
    for step in range(start_step, cfg.steps):
        tokens, mask = gen_batch(cfg.dup, cfg.batch_size, step)
        rotations = model.make_rotations(cfg.seed, step) if cfg.model.attention == "lsh" else None
        loss, grads, acc = model.loss_and_grads(tokens, mask, rotations)
        if not math.isfinite(loss):
            emit(MetricRecord(step, "abort", cfg.setting, last[0], last[1]))
            aborted = True
            reason = f"non-finite loss at step {step}; last finite loss {last[0]:.6f}"
            break
        last = (loss, acc)
        adam_step(model.params, grads, opt, lr_at(cfg, step),
                  cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.clip)
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            emit(MetricRecord(step, "train", cfg.setting, loss, acc))
            if cfg.early_stop_acc is not None:
                streak = streak + 1 if acc >= cfg.early_stop_acc else 0
                if streak >= cfg.early_stop_patience:
                    break
        if cfg.eval_every and step > 0 and step % cfg.eval_every == 0:
            for name, ev_loss, ev_acc in _eval_settings(model, cfg, step):
                emit(MetricRecord(step, "eval", name, ev_loss, ev_acc))
    return TrainResult(model=model, opt=opt, records=records, steps_run=step + 1,
                       aborted=aborted, abort_reason=reason)


def _eval_settings(model: Model, cfg: TrainConfig, step: int):
    for n in cfg.eval_hash_counts:
        name = f"lsh-{n}"
        loss, acc = evaluate(model, cfg.dup, name, cfg.eval_batches, cfg.batch_size,
                             seed=cfg.seed, tag=step)
        yield name, loss, acc


def _parse_setting(model: Model, setting: str):
    if setting == "full":
        return "full", None
    if setting.startswith("lsh-"):
        n_rounds = int(setting[len("lsh-"):])
        base = model.config.lsh or LshConfig(n_buckets=16)
        return "lsh", LshConfig(n_buckets=base.n_buckets, n_rounds=n_rounds,
                                chunk_len=base.chunk_len, seed=base.seed)
    raise ValueError(f"unknown eval setting {setting!r}")


def evaluate(model: Model, dup: DupConfig, setting: str, n_batches: int,
             batch_size: int, seed: int = 0, tag: int = 0):
    """Mean (loss, masked accuracy) over held-out batches for one setting.

    Held-out batches come from generator streams offset far beyond any
    training step index.
    """
    kind, lsh = _parse_setting(model, setting)
    losses, accs = [], []
    for i in range(n_batches):
        stream = EVAL_STREAM_OFFSET + tag * n_batches + i
        tokens, mask = gen_batch(dup, batch_size, stream)
        rotations = None
        if kind == "lsh":
            rotations = model.make_rotations(seed, stream, n_rounds=lsh.n_rounds, lsh=lsh)
        loss, acc = model.eval_metrics(tokens, mask, rotations, attention=kind, lsh=lsh)
        losses.append(loss)
        accs.append(acc)
    return float(np.mean(losses)), float(np.mean(accs))


def eval_matrix(model: Model, trained_setting: str, eval_settings, dup: DupConfig,
                n_batches: int = 20, batch_size: int = 32, seed: int = 0):
    """Accuracy of one trained model under each eval setting.

    Returns rows of {trained_setting, eval_setting, accuracy} in the order of
    ``eval_settings`` (e.g. ["full", "lsh-1", "lsh-2", "lsh-4", "lsh-8"]).
    """
    rows = []
    for setting in eval_settings:
        _, acc = evaluate(model, dup, setting, n_batches, batch_size, seed=seed)
        rows.append({"trained_setting": trained_setting, "eval_setting": setting,
                     "accuracy": acc})
    return rows


# -- presets -----------------------------------------------------------------


def desk_model(attention: str, n_rounds: int = 1, vocab_size: int = 128) -> ModelConfig:
    lsh = LshConfig(n_buckets=16, n_rounds=n_rounds) if attention == "lsh" else None
    return ModelConfig(vocab_size=vocab_size, d_model=64, d_ff=64, n_heads=4,
                       n_layers=1, max_len=64, attention=attention, lsh=lsh,
                       loss_chunks=4)


def make_preset(name: str) -> TrainConfig:
    """Named experiment configurations.

    desk-dup-*: w_len=31 (length 64), d_model=64, <=20K steps; runs on a CPU in
    minutes. paper-dup-*: the length-1024, d_model=256, 150K-step configuration
    (long run; hours).
    """
    desk_dup = DupConfig(symbol_max=127, w_len=31, seed=11)
    paper_dup = DupConfig(symbol_max=127, w_len=511, seed=11)
    presets = {}
    for nm, att, rounds in (("full", "full_shared_qk", 0), ("lsh1", "lsh", 1),
                            ("lsh2", "lsh", 2), ("lsh4", "lsh", 4)):
        presets[f"desk-dup-{nm}"] = TrainConfig(
            model=desk_model("lsh" if rounds else "full_shared_qk", max(rounds, 1)),
            dup=desk_dup, steps=20_000, batch_size=32, seed=7,
            early_stop_acc=0.999, early_stop_patience=4)
        paper_model = ModelConfig(
            vocab_size=128, d_model=256, d_ff=256, n_heads=4, n_layers=1,
            max_len=1024, attention=att if rounds else "full_shared_qk",
            lsh=LshConfig(n_buckets=64, n_rounds=max(rounds, 1)) if rounds else None,
            loss_chunks=16)
        presets[f"paper-dup-{nm}"] = TrainConfig(
            model=paper_model, dup=paper_dup, steps=150_000, batch_size=8, seed=7)
    if name not in presets:
        raise ValueError(f"unknown preset {name!r}; available: {sorted(presets)}")
    return presets[name]


PRESET_NAMES = tuple(f"{scale}-dup-{nm}" for scale in ("desk", "paper")
                     for nm in ("full", "lsh1", "lsh2", "lsh4"))
