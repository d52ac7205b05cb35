"""Aggregate metrics from several runs into a markdown table and a loss plot."""
from __future__ import annotations

import csv
import statistics
from collections import defaultdict
from pathlib import Path
from typing import Sequence

from .config import TrainConfig, apply_overrides, read_config_file
from .errors import InputError


def read_run(run_dir: Path) -> tuple[str, list[dict], list[dict]]:
    """(config label, metric rows, loss-log rows) for one run directory."""
    run_dir = Path(run_dir)
    cfg_path, metrics_path = run_dir / "config.txt", run_dir / "metrics.csv"
    if not metrics_path.exists():
        raise InputError(f"{run_dir}: no metrics.csv (run `eval` first)")
    label = apply_overrides(TrainConfig(), read_config_file(cfg_path)).label if cfg_path.exists() else run_dir.name
    with metrics_path.open(encoding="utf-8") as fh:
        metrics = list(csv.DictReader(fh))
    losses: list[dict] = []
    loss_path = run_dir / "losses.csv"
    if loss_path.exists():
        with loss_path.open(encoding="utf-8") as fh:
            losses = list(csv.DictReader(fh))
    return label, metrics, losses


def _mean_std(values: Sequence[float]) -> tuple[float, float]:
    # Sample standard deviation; a single run reports 0.
    mean = statistics.fmean(values)
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return mean, std


def aggregate(runs: Sequence[tuple[str, list[dict]]]) -> list[dict]:
    """Mean and std (in percent) of miou/acc per (config, ratio), over seeds."""
    groups: dict[tuple[str, str], list[dict]] = defaultdict(list)
    for label, rows in runs:
        for row in rows:
            groups[(label, row["ratio"])].append(row)
    table = []
    for (label, ratio), rows in sorted(groups.items()):
        entry = {"config": label, "ratio": ratio, "n": len(rows), "seeds": sorted({int(r["seed"]) for r in rows})}
        for metric in ("miou", "acc", "iou0", "iou1"):
            entry[metric], entry[f"{metric}_std"] = _mean_std([100.0 * float(r[metric]) for r in rows])
        table.append(entry)
    return table


def markdown_table(table: Sequence[dict]) -> str:
    lines = ["| config | ratio | runs | mIoU (%) | ACC (%) |", "|---|---|---|---|---|"]
    for e in table:
        lines.append(
            f"| {e['config']} | {e['ratio']} | {e['n']} | {e['miou']:.2f} ± {e['miou_std']:.2f} | {e['acc']:.2f} ± {e['acc_std']:.2f} |"
        )
    return "\n".join(lines) + "\n"


def plot_loss_curves(runs: Sequence[tuple[str, list[dict]]], path: Path) -> None:
    """Per-epoch mean total loss for every run, one colour per config."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 4))
    colours: dict[str, str] = {}
    for label, losses in runs:
        first = label not in colours
        if not losses:
            continue
        per_epoch: dict[int, list[float]] = defaultdict(list)
        for rec in losses:
            per_epoch[int(rec["epoch"])].append(float(rec["total"]))
        epochs = sorted(per_epoch)
        colour = colours.setdefault(label, f"C{len(colours) % 10}")
        ax.plot([e + 1 for e in epochs], [statistics.fmean(per_epoch[e]) for e in epochs], color=colour, alpha=0.8,
                label=label if first else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean total loss")
    if colours:
        ax.legend()
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def build_report(run_dirs: Sequence[Path], out_dir: Path) -> str:
    loaded = [read_run(d) for d in run_dirs]
    table = aggregate([(label, metrics) for label, metrics, _ in loaded])
    text = markdown_table(table)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(text, encoding="utf-8")
    plot_loss_curves([(label, losses) for label, _, losses in loaded], out_dir / "loss_curves.png")
    return text
