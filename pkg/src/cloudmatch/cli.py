"""Command-line entry point: ``cloudmatch <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as datamod
from .augment import make_views
from .config import TrainConfig, apply_overrides, read_config_file, write_config_file
from .errors import CloudMatchError
from .report import build_report
from .train import METRIC_COLUMNS, Trainer, evaluate, format_metric_row, model_from_checkpoint, write_loss_log

log = logging.getLogger("cloudmatch")


def _add_train_options(p: argparse.ArgumentParser) -> None:
    s = argparse.SUPPRESS
    p.add_argument("--config", help="key=value file; explicit flags override it")
    p.add_argument("--data", default=s, help="dataset directory (after `prepare`)")
    p.add_argument("--out", default=s, help="run output directory")
    p.add_argument("--labeled-ratio", choices=datamod.RATIOS, default=s)
    p.add_argument("--seed", type=int, default=s)
    p.add_argument("--epochs", type=int, default=s)
    p.add_argument("--batch-size", type=int, default=s)
    p.add_argument("--lr", type=float, default=s)
    p.add_argument("--momentum", type=float, default=s)
    p.add_argument("--lambda-w2s", type=float, default=s)
    p.add_argument("--lambda-vc", type=float, default=s)
    p.add_argument("--patch-size", type=int, default=s)
    p.add_argument("--w2s-conf-source", choices=("weak", "strong"), default=s)
    for flag in ("--no-vc", "--no-inter-mix", "--no-intra-mix", "--supervised-only"):
        p.add_argument(flag, action="store_true", default=s)
    p.add_argument("--checkpoint-every", type=int, default=0, help="also save a checkpoint every N epochs")
    p.add_argument("--resume", help="checkpoint to resume from")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cloudmatch", description="Semi-supervised cloud segmentation at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene collection")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=200)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("prepare", help="tile scenes, write split manifests and norm stats")
    p.add_argument("--data", required=True)
    p.add_argument("--patch", type=int, default=96)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-frac", type=float, default=0.25)
    p.add_argument("--test-seed", type=int, default=0)

    p = sub.add_parser("train", help="train a model")
    _add_train_options(p)

    p = sub.add_parser("eval", help="score a checkpoint on its test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", help="directory for metrics.csv (default: checkpoint directory)")

    p = sub.add_parser("augment-preview", help="write one view bundle as PNG files")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--labeled-ratio", choices=datamod.RATIOS, default="1/8")
    p.add_argument("--patch-size", type=int, default=96)

    p = sub.add_parser("report", help="aggregate run directories into a markdown table and loss plot")
    p.add_argument("runs", nargs="+")
    p.add_argument("--out", required=True)
    return parser


def config_from_args(args: argparse.Namespace) -> TrainConfig:
    overrides: dict = {}
    if args.config:
        overrides.update(read_config_file(Path(args.config)))
    skip = {"command", "verbose", "config", "checkpoint_every", "resume"}
    overrides.update({k: v for k, v in vars(args).items() if k not in skip})
    return apply_overrides(TrainConfig(), overrides)


def cmd_synth(args) -> None:
    ids = datamod.synthesize_dataset(Path(args.out), args.n, args.size, args.seed)
    print(f"wrote {len(ids)} scenes to {Path(args.out) / 'raw'}")


def cmd_prepare(args) -> None:
    manifests = datamod.prepare_dataset(Path(args.data), args.patch, args.seed, args.test_frac, args.test_seed)
    for ratio, m in manifests.items():
        print(f"{ratio}: {len(m.labeled_ids)} labeled, {len(m.unlabeled_ids)} unlabeled, {len(m.test_ids)} test")


def cmd_train(args) -> None:
    cfg = config_from_args(args)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "train.log", mode="a", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
    logging.getLogger("cloudmatch").addHandler(handler)
    try:
        write_config_file(out / "config.txt", cfg)
        trainer = Trainer(cfg)
        if args.resume:
            trainer.load(Path(args.resume))
        log.info("%s: %d steps/epoch, %d epochs, %d labeled / %d unlabeled", cfg.label, trainer.steps_per_epoch,
                 cfg.epochs, len(trainer.labeled), len(trainer.unlabeled))
        every = args.checkpoint_every * trainer.steps_per_epoch
        while trainer.step_count < trainer.total_steps:
            chunk = every if every else trainer.total_steps
            trainer.run(steps=chunk - trainer.step_count % chunk)
            if every and trainer.step_count < trainer.total_steps:
                trainer.save(out / f"epoch{trainer.step_count // trainer.steps_per_epoch:03d}.ckpt")
        trainer.save(out / "final.ckpt")
        write_loss_log(out / "losses.csv", trainer.history)
        from .report import plot_loss_curves

        plot_loss_curves([(cfg.label, [{k: str(v) for k, v in r.items()} for r in trainer.history])], out / "loss_curve.png")
        print(f"saved {out / 'final.ckpt'}")
    finally:
        logging.getLogger("cloudmatch").removeHandler(handler)
        handler.close()


def cmd_eval(args) -> None:
    cfg, model, _ = model_from_checkpoint(Path(args.checkpoint))
    manifest, stats = datamod.load_split(Path(cfg.data_dir), cfg.seed, cfg.labeled_ratio)
    tests = [datamod.read_sample(Path(cfg.data_dir), i, "test") for i in manifest.test_ids]
    row = evaluate(model, tests, stats, cfg.labeled_ratio, cfg.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(",".join(METRIC_COLUMNS) + "\n" + format_metric_row(row), encoding="utf-8")
    sys.stdout.write(format_metric_row(row))


def _to_uint8(raster: np.ndarray) -> np.ndarray:
    return np.clip(np.round(raster), 0, 255).astype(np.uint8)


def cmd_augment_preview(args) -> None:
    from .augment import AugConfig

    root, out = Path(args.data), Path(args.out)
    manifest, _ = datamod.load_split(root, args.seed, args.labeled_ratio)
    rng = np.random.default_rng(args.seed)
    ia, ib = rng.choice(len(manifest.unlabeled_ids), size=2, replace=False)
    xa = datamod.read_sample(root, manifest.unlabeled_ids[ia]).image.astype(np.float64)
    xb = datamod.read_sample(root, manifest.unlabeled_ids[ib]).image.astype(np.float64)
    bundle = make_views(xa, xb, args.seed, AugConfig(patch_size=args.patch_size))
    for name in bundle.VIEW_NAMES:
        datamod.save_png_rgb(out / f"{name}.png", _to_uint8(getattr(bundle, name)))
    for name, view, mask in (("aa", bundle.aa, bundle.m1), ("ab", bundle.ab, bundle.m2)):
        overlay = view.copy()
        edge = mask.as_grid.astype(bool) & ~_eroded(mask.as_grid.astype(bool))
        overlay[:, edge] = np.array([255.0, 0.0, 0.0])[:, None]
        datamod.save_png_rgb(out / f"{name}_mask_overlay.png", _to_uint8(overlay))
    print(f"wrote {len(bundle.VIEW_NAMES) + 2} images to {out} (intra mix: {bundle.apply_intra}, inter mix: {bundle.apply_inter})")


def _eroded(grid: np.ndarray) -> np.ndarray:
    inner = np.zeros_like(grid)
    inner[1:-1, 1:-1] = grid[1:-1, 1:-1] & grid[:-2, 1:-1] & grid[2:, 1:-1] & grid[1:-1, :-2] & grid[1:-1, 2:]
    return inner


def cmd_report(args) -> None:
    sys.stdout.write(build_report([Path(r) for r in args.runs], Path(args.out)))


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "augment-preview": cmd_augment_preview,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        COMMANDS[args.command](args)
    except (CloudMatchError, OSError, KeyError) as exc:
        print(f"cloudmatch {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
