"""Ablation table on the synthetic benchmark.

Trains every variant for each seed (200 scenes at 96x96, 1/8 labels by
default), then prints a markdown table of mean +/- stdev test mIoU and ACC.

    python3 scripts/run_ablation.py --root runs/ablation --seeds 0 1 2
"""
import argparse
import statistics
from collections import defaultdict
from pathlib import Path

from cloudmatch.experiment import VARIANTS, ensure_synthetic, run_many


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--root", type=Path, default=Path("runs/ablation"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--epochs", type=int, default=80)
    ap.add_argument("--ratio", default="1/8")
    ap.add_argument("--variants", nargs="+", default=list(VARIANTS), choices=list(VARIANTS))
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--reuse", action="store_true", help="reuse finished runs with a matching source/config key")
    args = ap.parse_args()

    data = ensure_synthetic(args.root / "data", split_seeds=args.seeds)
    jobs = [(str(data), str(args.root / f"{v}_s{s}"), v, s, args.epochs, args.ratio, args.reuse)
            for v in args.variants for s in args.seeds]
    by_variant = defaultdict(list)
    for r in run_many(jobs, args.workers):
        by_variant[r["variant"]].append(r)

    print(f"| variant | ratio | seeds | mIoU | ACC | minutes/run |")
    print("|---|---|---|---|---|---|")
    for v in args.variants:
        rs = by_variant[v]
        miou = [100 * r["miou"] for r in rs]
        acc = [100 * r["acc"] for r in rs]
        sd = lambda xs: statistics.stdev(xs) if len(xs) > 1 else 0.0
        minutes = statistics.mean(r["seconds"] for r in rs) / 60
        print(f"| {v} | {args.ratio} | {len(rs)} | {statistics.mean(miou):.2f} ± {sd(miou):.2f} "
              f"| {statistics.mean(acc):.2f} ± {sd(acc):.2f} | {minutes:.1f} |")


if __name__ == "__main__":
    main()
