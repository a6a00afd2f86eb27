"""Render training-run figures and a delimited summary from the metrics stream.

Reads ``metrics.jsonl`` from a run directory and writes PNG figures (loss
curves, per-layer substituted-token fractions, per-layer mean scores)
plus ``summary.csv`` next to them.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

from .errors import ConfigError


def load_metrics(run_dir):
    """Split the JSONL stream into step records and final-eval records."""
    path = Path(run_dir) / "metrics.jsonl"
    if not path.exists():
        raise ConfigError(f"no metrics.jsonl under {run_dir}")
    steps, finals = [], []
    for line in path.read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        (finals if "event" in record else steps).append(record)
    return steps, finals


def _flatten_fractions(record):
    pairs = []
    for m, per_mod in enumerate(record.get("substituted_fraction", [])):
        for l, value in enumerate(per_mod):
            pairs.append((f"m{m}_l{l + 1}", value))
    return pairs


def write_summary_csv(run_dir, out_dir) -> Path:
    steps, finals = load_metrics(run_dir)
    out = Path(out_dir) / "summary.csv"
    rows = []
    for record in finals:
        row = {"event": record["event"], "step": record["step"],
               "loss": record.get("loss"), "token_l1": record.get("token_l1")}
        for m, value in enumerate(record.get("task", [])):
            row[f"task_m{m}"] = value
        if "ensemble_mse" in record:
            row["ensemble_mse"] = record["ensemble_mse"]
        for name, value in _flatten_fractions(record):
            row[f"frac_{name}"] = value
        rows.append(row)
    if not rows and steps:
        last = steps[-1]
        row = {"event": "last_step", "step": last["step"], "loss": last["loss"],
               "token_l1": last["token_l1"]}
        for m, value in enumerate(last.get("task", [])):
            row[f"task_m{m}"] = value
        for name, value in _flatten_fractions(last):
            row[f"frac_{name}"] = value
        rows.append(row)
    if not rows:
        raise ConfigError("metrics stream is empty")
    fieldnames = sorted({key for row in rows for key in row},
                        key=lambda k: (k not in ("event", "step"), k))
    with out.open("w", newline="") as sink:
        writer = csv.DictWriter(sink, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return out


def render_figures(run_dir, out_dir) -> list:
    """Write loss/sparsity/score figures; returns the created paths."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    steps, _ = load_metrics(run_dir)
    if not steps:
        raise ConfigError("metrics stream has no step records to plot")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    xs = [r["step"] for r in steps]
    written = []

    fig, ax = plt.subplots(figsize=(7, 4.2))
    ax.plot(xs, [r["loss"] for r in steps], label="total", lw=1.6)
    for m in range(len(steps[0]["task"])):
        ax.plot(xs, [r["task"][m] for r in steps], label=f"task m{m}", lw=1.0)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    path = out_dir / "loss_curves.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    written.append(path)

    for key, fname, title in (("substituted_fraction", "substitution_fractions.png",
                               "substituted-token fraction"),
                              ("mean_score", "mean_scores.png", "mean token score")):
        fig, ax = plt.subplots(figsize=(7, 4.2))
        series = steps[0].get(key, [])
        for m, per_mod in enumerate(series):
            for l in range(len(per_mod)):
                ys = [r[key][m][l] for r in steps]
                if all(v is None for v in ys):
                    continue
                ys = [float("nan") if v is None else v for v in ys]
                ax.plot(xs, ys, label=f"m{m} layer {l + 1}", lw=1.0)
        ax.set_xlabel("step")
        ax.set_ylabel(title)
        ax.set_ylim(-0.02, 1.02)
        ax.legend(fontsize=7, ncol=2)
        ax.set_title(title)
        fig.tight_layout()
        path = out_dir / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(path)
    return written


def build_report(run_dir, out_dir=None) -> list:
    out_dir = Path(out_dir) if out_dir is not None else Path(run_dir) / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    written = render_figures(run_dir, out_dir)
    written.append(write_summary_csv(run_dir, out_dir))
    return written
