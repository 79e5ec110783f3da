"""Command-line entry point.

Subcommands: gen-data, train, eval, bench-attn, mem-report. Results are CSV
or newline-delimited JSON records; file outputs get a .manifest.json and,
unless --no-plot is given, a rendered PNG alongside. Exit codes: 0 success,
2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import report
from .bench import BenchSpec, MemReportSpec, bench_attention, mem_report
from .duplication import DupConfig, dump_examples
from .model import config_from_dict, config_to_dict, load_checkpoint
from .trainer import (PRESET_NAMES, AdamState, TrainConfig, eval_matrix, make_preset,
                      setting_name, train)


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lshformer",
                                 description="bucketed-attention sequence model toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write duplication-task examples, one per line")
    g.add_argument("--n", type=int, default=127, help="largest symbol (alphabet 1..n)")
    g.add_argument("--w-len", type=int, default=511, help="word length (sequence is 2*(w+1))")
    g.add_argument("--count", type=int, default=1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=str, default=None, help="output file (default stdout)")

    t = sub.add_parser("train", help="train a model on the duplication task")
    t.add_argument("--preset", type=str, default=None,
                   help=f"one of {', '.join(PRESET_NAMES)}")
    t.add_argument("--config", type=str, default=None, help="JSON train config file")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--batch-size", type=int, default=None)
    t.add_argument("--metrics", type=str, default=None, help="JSONL metric stream path")
    t.add_argument("--checkpoint", type=str, default=None, help="final checkpoint path")
    t.add_argument("--resume", type=str, default=None, help="checkpoint to resume from")
    t.add_argument("--no-plot", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint under several attention settings")
    e.add_argument("--checkpoint", type=str, required=True)
    e.add_argument("--eval-hashes", type=_int_list, default=(1, 2, 4, 8))
    e.add_argument("--include-full", dest="include_full", action="store_true", default=True)
    e.add_argument("--no-full", dest="include_full", action="store_false")
    e.add_argument("--batches", type=int, default=20)
    e.add_argument("--batch-size", type=int, default=32)
    e.add_argument("--w-len", type=int, default=None, help="override task word length")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", type=str, default=None, help="CSV path (default stdout)")
    e.add_argument("--no-plot", action="store_true")

    b = sub.add_parser("bench-attn", help="time attention forward passes at fixed token budget")
    b.add_argument("--kinds", type=_str_list, default=("dense", "lsh"))
    b.add_argument("--lengths", type=_int_list, default=(1024, 2048, 4096, 8192))
    b.add_argument("--budget", type=int, default=1 << 17)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--warmup", type=int, default=2)
    b.add_argument("--d-k", type=int, default=64)
    b.add_argument("--chunk-len", type=int, default=64)
    b.add_argument("--n-rounds", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out", type=str, default=None)
    b.add_argument("--no-plot", action="store_true")

    m = sub.add_parser("mem-report", help="peak activation floats, reversible vs stored backward")
    m.add_argument("--layers", type=_int_list, default=(1, 2, 4, 8))
    m.add_argument("--modes", type=_str_list, default=("reversible", "stored"))
    m.add_argument("--chunks", type=int, default=32, help="feed-forward chunk count")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", type=str, default=None)
    m.add_argument("--no-plot", action="store_true")
    return ap


def _finish_output(rows, header, out, command, config, seed, no_plot, renderer):
    path = report.write_csv(rows, header, out)
    if path is not None:
        report.write_manifest(path, command, config, seed)
        if not no_plot:
            renderer(rows, report.figure_path(path))


def cmd_gen_data(args) -> int:
    cfg = DupConfig(symbol_max=args.n, w_len=args.w_len, seed=args.seed)
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with out.open("w") as fh:
            dump_examples(cfg, args.count, fh)
        report.write_manifest(out, "gen-data",
                              {"symbol_max": cfg.symbol_max, "w_len": cfg.w_len,
                               "count": args.count}, args.seed)
    else:
        dump_examples(cfg, args.count, sys.stdout)
    return 0


def _load_train_config(args) -> TrainConfig:
    if args.preset:
        cfg = make_preset(args.preset)
    elif args.config:
        raw = json.loads(Path(args.config).read_text())
        model = config_from_dict(raw.pop("model"))
        dup = DupConfig(**raw.pop("dup"))
        if "eval_hash_counts" in raw:
            raw["eval_hash_counts"] = tuple(raw["eval_hash_counts"])
        cfg = TrainConfig(model=model, dup=dup, **raw)
    else:
        raise SystemExit("train requires --preset or --config")
    overrides = {}
    for name in ("steps", "seed", "batch_size"):
        val = getattr(args, name)
        if val is not None:
            overrides[name] = val
    return replace(cfg, **overrides) if overrides else cfg


def _train_config_dict(cfg: TrainConfig) -> dict:
    d = {k: getattr(cfg, k) for k in cfg.__dataclass_fields__}
    d["model"] = config_to_dict(cfg.model)
    d["dup"] = {k: getattr(cfg.dup, k) for k in cfg.dup.__dataclass_fields__}
    return d


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    model = opt = None
    start_step = 0
    if args.resume:
        model, start_step, extra, opt_arrays = load_checkpoint(args.resume)
        opt = AdamState.from_arrays(opt_arrays, t=extra.get("adam_t", 0),
                                    skipped=extra.get("adam_skipped", 0))
    stream = None
    metrics_path = None
    if args.metrics:
        metrics_path = Path(args.metrics)
        metrics_path.parent.mkdir(parents=True, exist_ok=True)
        stream = metrics_path.open("w")
    try:
        result = train(cfg, metrics_stream=stream,
                       on_record=lambda r: print(r.to_json(), flush=True),
                       model=model, opt=opt, start_step=start_step)
    finally:
        if stream is not None:
            stream.close()
    if metrics_path is not None:
        report.write_manifest(metrics_path, "train", _train_config_dict(cfg), cfg.seed)
        if not args.no_plot:
            report.render_train_curve(metrics_path, report.figure_path(metrics_path))
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        ckpt.parent.mkdir(parents=True, exist_ok=True)
        result.model.save_checkpoint(
            ckpt, step=result.steps_run,
            extra={"adam_t": result.opt.t, "adam_skipped": result.opt.skipped,
                   "trained_setting": cfg.setting,
                   "dup": {"symbol_max": cfg.dup.symbol_max, "w_len": cfg.dup.w_len,
                           "seed": cfg.dup.seed}},
            opt_arrays=result.opt.arrays())
        report.write_manifest(ckpt, "train", _train_config_dict(cfg), cfg.seed)
    if result.aborted:
        print(f"aborted: {result.abort_reason}", file=sys.stderr)
        return 1
    return 0


def cmd_eval(args) -> int:
    model, _step, extra, _opt = load_checkpoint(args.checkpoint)
    dup_meta = extra.get("dup", {})
    w_len = args.w_len or dup_meta.get("w_len") or model.config.max_len // 2 - 1
    dup = DupConfig(symbol_max=dup_meta.get("symbol_max", model.config.vocab_size - 1),
                    w_len=w_len, seed=dup_meta.get("seed", 0))
    settings = (["full"] if args.include_full else []) + [f"lsh-{n}" for n in args.eval_hashes]
    trained = extra.get("trained_setting", setting_name(model.config))
    rows = eval_matrix(model, trained, settings, dup, n_batches=args.batches,
                       batch_size=args.batch_size, seed=args.seed)
    for row in rows:
        row["accuracy"] = round(float(row["accuracy"]), 6)
    _finish_output(rows, ["trained_setting", "eval_setting", "accuracy"], args.out,
                   "eval", {"checkpoint": args.checkpoint, "settings": settings,
                            "batches": args.batches, "batch_size": args.batch_size,
                            "w_len": w_len}, args.seed, args.no_plot,
                   report.render_eval_figure)
    return 0


def cmd_bench_attn(args) -> int:
    spec = BenchSpec(kinds=args.kinds, lengths=args.lengths, budget=args.budget,
                     reps=args.reps, warmup=args.warmup, d_k=args.d_k,
                     chunk_len=args.chunk_len, n_rounds=args.n_rounds, seed=args.seed)
    rows = bench_attention(spec)
    _finish_output(rows, ["kind", "length", "batch", "mean_ms", "std_ms", "median_ms", "status"],
                   args.out, "bench-attn", spec.__dict__, args.seed, args.no_plot,
                   report.render_bench_figure)
    return 0


def cmd_mem_report(args) -> int:
    spec = MemReportSpec(n_layers=args.layers, modes=args.modes, ff_chunks=args.chunks,
                         seed=args.seed)
    rows = mem_report(spec)
    _finish_output(rows, ["n_l", "mode", "ff_chunks", "peak_floats"], args.out,
                   "mem-report", spec.__dict__, args.seed, args.no_plot,
                   report.render_mem_figure)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "bench-attn": cmd_bench_attn,
    "mem-report": cmd_mem_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except SystemExit:
        raise
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
