"""Delimited output plus rendered figures.

Every command that writes a CSV also drops a run manifest (full resolved
configuration + seed + package version) next to it, and, unless plotting is
disabled, a PNG figure with the same stem. CSV schemas are stable; the header
row is always present.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path


def _version() -> str:
    from . import __version__
    return __version__


def write_csv(rows: list[dict], header: list[str], path: str | None):
    """Write rows to ``path`` or stdout; returns the Path or None for stdout."""
    if path is None:
        writer = csv.DictWriter(sys.stdout, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
        return None
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=header, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return out


def write_manifest(out_path: Path, command: str, config: dict, seed) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "version": _version(),
    }
    path = out_path.with_suffix(out_path.suffix + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    return path


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def figure_path(csv_path: Path) -> Path:
    return csv_path.with_suffix(".png")


def render_bench_figure(rows: list[dict], png_path: Path) -> Path:
    """Attention time vs length, one line per kind, at fixed token budget."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    kinds = sorted({r["kind"] for r in rows})
    for kind in kinds:
        pts = [(r["length"], r["mean_ms"]) for r in rows
               if r["kind"] == kind and r["status"] == "ok"]
        if not pts:
            continue
        xs, ys = zip(*sorted(pts))
        ax.plot(xs, ys, marker="o", label=kind)
    ax.set_xlabel("sequence length (fixed total tokens)")
    ax.set_ylabel("mean forward time [ms]")
    ax.set_xscale("log", base=2)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def render_mem_figure(rows: list[dict], png_path: Path) -> Path:
    """Peak activation floats vs layer count, one line per backward mode."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    for mode in sorted({r["mode"] for r in rows}):
        pts = sorted((r["n_l"], r["peak_floats"]) for r in rows if r["mode"] == mode)
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=mode)
    ax.set_xlabel("layers")
    ax.set_ylabel("peak live activation floats")
    ax.set_ylim(bottom=0)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def render_eval_figure(rows: list[dict], png_path: Path) -> Path:
    """Accuracy per eval setting, grouped by trained setting."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    trained = sorted({r["trained_setting"] for r in rows})
    settings = list(dict.fromkeys(r["eval_setting"] for r in rows))
    xs = range(len(settings))
    for t in trained:
        accs = [next((float(r["accuracy"]) for r in rows
                      if r["trained_setting"] == t and r["eval_setting"] == s), None)
                for s in settings]
        ax.plot(xs, accs, marker="o", label=f"trained {t}")
    ax.set_xticks(list(xs), settings)
    ax.set_xlabel("eval setting")
    ax.set_ylabel("masked accuracy")
    ax.set_ylim(0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path


def render_train_curve(metrics_path: Path, png_path: Path) -> Path:
    """Loss and masked accuracy over steps from a metrics JSONL file."""
    plt = _pyplot()
    steps, losses, accs = [], [], []
    with open(metrics_path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("split") == "train":
                steps.append(rec["step"])
                losses.append(rec["loss"])
                accs.append(rec["accuracy"])
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(steps, losses, label="loss", color="tab:red")
    ax.set_xlabel("step")
    ax.set_ylabel("masked loss")
    ax2 = ax.twinx()
    ax2.plot(steps, accs, label="accuracy", color="tab:blue")
    ax2.set_ylabel("masked accuracy")
    ax2.set_ylim(0, 1.05)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(png_path, dpi=120)
    plt.close(fig)
    return png_path
