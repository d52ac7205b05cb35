"""Desk-scale comparison runs: synthetic data, ablation variants, seeds.

Each run trains from scratch, writes the usual run directory (config,
checkpoint, loss log, metrics row) and returns a small summary dict, so a
driver can fan runs out over processes and aggregate afterwards.
"""
from __future__ import annotations

import hashlib
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Iterable

from .config import TrainConfig, write_config_file
from .data import prepare_dataset, synthesize_dataset
from .train import METRIC_COLUMNS, Trainer, evaluate, format_metric_row, write_loss_log

VARIANTS: dict[str, dict] = {
    "cloudmatch": {},
    "supervised_only": {"supervised_only": True},
    "no_vc": {"no_vc": True},
    "no_inter_mix": {"no_inter_mix": True},
    "no_intra_mix": {"no_intra_mix": True},
}


def ensure_synthetic(root: Path, n_scenes: int = 200, size: int = 96, seed: int = 0, split_seeds: Iterable[int] = (0, 1, 2)) -> Path:
    """Generate and prepare the synthetic benchmark once; later calls reuse it."""
    root = Path(root)
    if not (root / "raw" / "images").exists():
        synthesize_dataset(root, n_scenes, size, seed)
    for s in split_seeds:
        if not (root / "splits" / str(s) / "norm_stats.txt").exists():
            prepare_dataset(root, size, s)
    return root


def source_fingerprint() -> str:
    """SHA-256 over the package's own source files."""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def run_one(data_dir: str, out_dir: str, variant: str, seed: int, epochs: int = 80, labeled_ratio: str = "1/8", reuse: bool = False) -> dict:
    """Train one variant from scratch and summarise it.

    With ``reuse`` a previous ``summary.json`` in ``out_dir`` is returned
    instead, but only if it was produced by identical source code and config.
    """
    cfg = replace(TrainConfig(data_dir=str(data_dir), out_dir=str(out_dir), epochs=epochs, seed=seed, labeled_ratio=labeled_ratio),
                  **VARIANTS[variant])
    out = Path(out_dir)
    key = hashlib.sha256((source_fingerprint() + json.dumps(cfg.to_dict(), sort_keys=True)).encode()).hexdigest()
    summary_path = out / "summary.json"
    if reuse and summary_path.exists():
        cached = json.loads(summary_path.read_text(encoding="utf-8"))
        if cached.get("key") == key:
            return cached
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "config.txt", cfg)
    start = time.perf_counter()
    trainer = Trainer(cfg)
    trainer.run()
    seconds = time.perf_counter() - start
    trainer.save(out / "final.ckpt")
    write_loss_log(out / "losses.csv", trainer.history)
    row = evaluate(trainer.model, trainer.test_samples(), trainer.stats, cfg.labeled_ratio, seed)
    line = format_metric_row(row)
    (out / "metrics.csv").write_text(",".join(METRIC_COLUMNS) + "\n" + line, encoding="utf-8")
    summary = {
        "key": key,
        "variant": variant,
        "seed": seed,
        "miou": row["miou"],
        "acc": row["acc"],
        "seconds": seconds,
        "steps": trainer.step_count,
        "metric_row": line,
        "checkpoint_sha256": hashlib.sha256((out / "final.ckpt").read_bytes()).hexdigest(),
        "out_dir": str(out),
    }
    summary_path.write_text(json.dumps(summary, indent=1, sort_keys=True), encoding="utf-8")
    return summary


def _run_job(job: tuple) -> dict:
    return run_one(*job)


def run_many(jobs: list[tuple], workers: int | None = None) -> list[dict]:
    """Run ``(data_dir, out_dir, variant, seed, epochs, ratio[, reuse])`` jobs, in parallel when cores allow."""
    workers = workers or min(len(jobs), os.cpu_count() or 1)
    if workers <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run_job, jobs))
