"""CloudMatch training loop, SGD, evaluation and checkpoints.

Randomness is counter-based: every per-epoch shuffle and per-step
augmentation seed is derived from ``(seed, stream, counter)`` via
``numpy.random.SeedSequence``. The RNG state of a run is therefore fully
described by its seed and global step, which is what checkpoints store.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .augment import apply_geom, make_views, sample_geom
from .backbone import SegmentationModel, TinySegNet
from .config import TrainConfig
from .data import NormStats, Sample, apply_norm, load_split, read_sample
from .errors import ContractError, InputError
from .losses import (
    AdaptiveThreshold,
    make_pseudolabel,
    mix_weak_features,
    one_hot,
    supervised_loss,
    total_loss,
    update_adaptive_threshold,
    view_consistency_loss,
    w2s_loss,
)
from .metrics import ConfusionCounts, accumulate, scores
from .tensor import Tensor, no_grad, softmax_channels

log = logging.getLogger(__name__)

LOSS_KEYS = ("total", "sup", "w2s_aa", "w2s_ab", "vc_aa", "vc_ab")
METRIC_COLUMNS = ("split", "ratio", "seed", "iou0", "iou1", "miou", "acc")

# SeedSequence stream ids
_UNLABELED_ORDER, _LABELED_DRAW, _AUGMENT = 1, 2, 3


# -- optimiser ----------------------------------------------------------------


def sgd_update(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float, momentum: float, velocity: dict[str, np.ndarray] | None = None):
    """Heavy-ball SGD: ``v <- momentum * v + g``, ``p <- p - lr * v``.

    Returns new ``(params, velocity)`` dicts; inputs are not modified.
    """
    if lr <= 0:
        raise ContractError(f"lr must be positive, got {lr}")
    velocity = velocity or {}
    new_params, new_velocity = {}, {}
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        v = momentum * velocity[name] + g if name in velocity else g.copy()
        new_velocity[name] = v
        new_params[name] = p - lr * v
    return new_params, new_velocity


@dataclass
class SGD:
    lr: float = 0.01
    momentum: float = 0.9
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, Tensor]) -> None:
        new_params, self.velocity = sgd_update(
            {k: p.data for k, p in params.items()}, {k: p.grad for k, p in params.items() if p.grad is not None}, self.lr, self.momentum, self.velocity
        )
        for name, p in params.items():
            p.data = new_params[name]


# -- one training step ------------------------------------------------------------


@dataclass
class StepResult:
    losses: dict[str, float]
    thresh: AdaptiveThreshold
    valid_aa: float = 0.0
    valid_ab: float = 0.0


def _labeled_inputs(batch: Sequence[Sample], seeds, cfg: TrainConfig, stats: NormStats):
    aug = cfg.effective_aug()
    images, targets = [], []
    for sample, seed in zip(batch, seeds):
        if sample.mask is None:
            raise ContractError(f"labeled sample {sample.id} has no ground-truth mask")
        geom = sample_geom(seed, sample.image.shape[1], sample.image.shape[2], aug)
        images.append(apply_norm(apply_geom(sample.image.astype(np.float64), geom), stats))
        targets.append(apply_geom(sample.mask, geom, nearest=True))
    return Tensor(np.stack(images)), one_hot(np.stack(targets))


def train_step(
    model: SegmentationModel,
    labeled_batch: Sequence[Sample],
    unlabeled_pairs: Sequence[tuple[Sample, Sample]],
    cfg: TrainConfig,
    thresh: AdaptiveThreshold,
    stats: NormStats,
    optimizer: SGD,
    rng_seed,
) -> StepResult:
    """Compute every loss term for one batch, backpropagate and update ``model``."""
    if not labeled_batch:
        raise ContractError("train_step needs a non-empty labeled batch")
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    lab_seeds, unl_seeds = ss.spawn(2)
    weights = cfg.effective_weights()
    aug = cfg.effective_aug()

    x_l, t_l = _labeled_inputs(labeled_batch, lab_seeds.spawn(len(labeled_batch)), cfg, stats)
    sup = supervised_loss(softmax_channels(model(x_l)), t_l)
    zero = Tensor(0.0)
    w2s_aa = w2s_ab = vc_aa = vc_ab = zero
    new_thresh = thresh
    valid_aa = valid_ab = 0.0

    if not cfg.supervised_only and unlabeled_pairs:
        pair_seeds = unl_seeds.spawn(len(unlabeled_pairs))
        bundles = [make_views(a.image.astype(np.float64), b.image.astype(np.float64), s, aug) for (a, b), s in zip(unlabeled_pairs, pair_seeds)]
        n = len(bundles)

        def batch_of(name: str) -> np.ndarray:
            return np.stack([apply_norm(getattr(bundle, name), stats) for bundle in bundles])

        with no_grad():
            zw = model(Tensor(np.concatenate([batch_of("w1a"), batch_of("w2a"), batch_of("wb")]))).data
            weak_conf = softmax_channels(Tensor(zw)).data.max(axis=1)
        zw1a, zw2a, zwb = zw[:n], zw[n : 2 * n], zw[2 * n :]
        mixed = [mix_weak_features(zw1a[i], zw2a[i], zwb[i], b.m1, b.m2) for i, b in enumerate(bundles)]
        zw_aa = Tensor(np.stack([m[0].data for m in mixed]))
        zw_ab = Tensor(np.stack([m[1].data for m in mixed]))
        with no_grad():
            pl_aa = make_pseudolabel(softmax_channels(zw_aa), cfg.pseudo_threshold)
            pl_ab = make_pseudolabel(softmax_channels(zw_ab), cfg.pseudo_threshold)

        z_aa = model(Tensor(batch_of("aa")))
        z_ab = model(Tensor(batch_of("ab")))
        tau = thresh.tau
        w2s_aa = w2s_loss(softmax_channels(z_aa), pl_aa, tau=tau, conf_source=cfg.w2s_conf_source)
        w2s_ab = w2s_loss(softmax_channels(z_ab), pl_ab, tau=tau, conf_source=cfg.w2s_conf_source)
        vc_aa = view_consistency_loss(zw_aa, z_aa)
        vc_ab = view_consistency_loss(zw_ab, z_ab)
        valid_aa = float((pl_aa.valid & (pl_aa.confidence > tau)).mean())
        valid_ab = float((pl_ab.valid & (pl_ab.confidence > tau)).mean())
        new_thresh = update_adaptive_threshold(thresh, weak_conf)

    loss = total_loss(sup, w2s_aa, w2s_ab, vc_aa, vc_ab, weights)
    params = model.parameters()
    for p in params.values():
        p.zero_grad()
    loss.backward()
    optimizer.step(params)

    values = dict(zip(LOSS_KEYS, (t.item() for t in (loss, sup, w2s_aa, w2s_ab, vc_aa, vc_ab))))
    return StepResult(losses=values, thresh=new_thresh, valid_aa=valid_aa, valid_ab=valid_ab)


# -- evaluation -------------------------------------------------------------------


def predict(model: SegmentationModel, images: np.ndarray) -> np.ndarray:
    """Per-pixel argmax class for a normalised [N,3,H,W] batch."""
    with no_grad():
        return softmax_channels(model(Tensor(images))).data.argmax(axis=1)


def evaluate_counts(model: SegmentationModel, samples: Sequence[Sample], stats: NormStats, batch_size: int = 8) -> ConfusionCounts:
    counts = ConfusionCounts()
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        for s in chunk:
            if s.mask is None:
                raise ContractError(f"test sample {s.id} has no ground-truth mask")
        preds = predict(model, np.stack([apply_norm(s.image, stats) for s in chunk]))
        for s, pred in zip(chunk, preds):
            counts = accumulate(counts, pred, s.mask)
    return counts


def evaluate(model: SegmentationModel, test_samples: Sequence[Sample], stats: NormStats, ratio: str = "", seed: int = 0, split: str = "test") -> dict:
    """Pooled scores over all test pixels, as a metrics CSV row (dict)."""
    if not test_samples:
        raise ContractError("evaluate needs a non-empty test split")
    row = {"split": split, "ratio": ratio, "seed": seed}
    row.update(scores(evaluate_counts(model, test_samples, stats)))
    return row


def format_metric_row(row: dict) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerow(
        [row[c] if c in ("split", "ratio", "seed") else f"{row[c]:.6f}" for c in METRIC_COLUMNS]
    )
    return buf.getvalue()


def write_metric_rows(path: Path, rows: Sequence[dict]) -> None:
    path = Path(path)
    new = not path.exists()
    with path.open("a", encoding="utf-8") as fh:
        if new:
            fh.write(",".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            fh.write(format_metric_row(row))


# -- checkpoints ----------------------------------------------------------------

CHECKPOINT_HEADER = b"CLOUDMATCH-CHECKPOINT v1\n"


def save_checkpoint(path: Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Header line, length-prefixed JSON metadata, then named float64 arrays.

    Every integer is little-endian; each array is ``u32 name length, name,
    u32 ndim, ndim x u64 dims, float64 data`` in row-major order.
    """
    out = bytearray(CHECKPOINT_HEADER)
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", len(blob)) + blob
    out += struct.pack("<I", len(arrays))
    for name in sorted(arrays):
        key = name.encode("utf-8")
        arr = np.array(arrays[name], dtype="<f8", order="C")
        out += struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape) + arr.tobytes()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if not raw.startswith(CHECKPOINT_HEADER):
        raise InputError(f"{path} is not a checkpoint (bad header)")
    pos = len(CHECKPOINT_HEADER)

    def take(fmt: str):
        nonlocal pos
        values = struct.unpack_from(fmt, raw, pos)
        pos += struct.calcsize(fmt)
        return values

    try:
        (meta_len,) = take("<I")
        meta = json.loads(raw[pos : pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = take("<I")
        arrays = {}
        for _ in range(count):
            (name_len,) = take("<I")
            name = raw[pos : pos + name_len].decode("utf-8")
            pos += name_len
            (ndim,) = take("<I")
            shape = take(f"<{ndim}Q")
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise InputError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    return meta, arrays


# -- the training loop ------------------------------------------------------------


class Trainer:
    """Owns model, optimiser, threshold state and data streams for one run."""

    def __init__(self, cfg: TrainConfig, model: SegmentationModel | None = None):
        self.cfg = cfg
        root = Path(cfg.data_dir)
        self.manifest, self.stats = load_split(root, cfg.seed, cfg.labeled_ratio)
        self.labeled = [read_sample(root, i, "labeled") for i in self.manifest.labeled_ids]
        self.unlabeled = [read_sample(root, i, "unlabeled") for i in self.manifest.unlabeled_ids]
        if not self.labeled:
            raise ContractError("the labeled split is empty")
        if len(self.unlabeled) < 2:
            raise ContractError("need at least two unlabeled samples to form pairs")
        self.model = model if model is not None else TinySegNet.init_parameters(cfg.seed)
        self.optimizer = SGD(cfg.lr, cfg.momentum)
        self.thresh = AdaptiveThreshold(ema=0.5, ema_momentum=cfg.ema_momentum, tau_floor=cfg.tau_floor)
        self.step_count = 0
        self.history: list[dict] = []

    @property
    def steps_per_epoch(self) -> int:
        return max(1, (len(self.unlabeled) // 2) // self.cfg.batch_size)

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.steps_per_epoch

    def _batches(self, step: int):
        cfg = self.cfg
        epoch, index = divmod(step, self.steps_per_epoch)
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, _UNLABELED_ORDER, epoch])).permutation(len(self.unlabeled))
        pairs = order[: 2 * (len(order) // 2)].reshape(-1, 2)[index * cfg.batch_size : (index + 1) * cfg.batch_size]
        draw = np.random.default_rng(np.random.SeedSequence([cfg.seed, _LABELED_DRAW, step]))
        pick = draw.choice(len(self.labeled), size=min(cfg.batch_size, len(self.labeled)), replace=False)
        return [self.labeled[i] for i in pick], [(self.unlabeled[a], self.unlabeled[b]) for a, b in pairs]

    def step(self) -> dict:
        labeled, pairs = self._batches(self.step_count)
        seed = np.random.SeedSequence([self.cfg.seed, _AUGMENT, self.step_count])
        result = train_step(self.model, labeled, pairs, self.cfg, self.thresh, self.stats, self.optimizer, seed)
        self.thresh = result.thresh
        record = {"step": self.step_count, "epoch": self.step_count // self.steps_per_epoch, **result.losses,
                  "tau": self.thresh.tau, "valid_aa": result.valid_aa, "valid_ab": result.valid_ab}
        self.history.append(record)
        self.step_count += 1
        return record

    def run(self, steps: int | None = None) -> list[dict]:
        target = self.total_steps if steps is None else min(self.total_steps, self.step_count + steps)
        epoch_start = time.perf_counter()
        while self.step_count < target:
            record = self.step()
            if self.step_count % self.steps_per_epoch == 0:
                elapsed = time.perf_counter() - epoch_start
                log.info("epoch %d/%d  loss %.4f  sup %.4f  tau %.3f  (%.1fs)", record["epoch"] + 1, self.cfg.epochs,
                         record["total"], record["sup"], record["tau"], elapsed)
                epoch_start = time.perf_counter()
        return self.history

    # checkpoint state

    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        cfg = self.cfg.to_dict()
        cfg.pop("out_dir")
        meta = {
            "format": 1,
            "backbone": type(self.model).__name__,
            "config": cfg,
            "step": self.step_count,
            "epoch": self.step_count // self.steps_per_epoch,
            "threshold": {"ema": self.thresh.ema, "ema_momentum": self.thresh.ema_momentum,
                          "tau_floor": self.thresh.tau_floor, "tau_ceil": self.thresh.tau_ceil},
            "rng": {"kind": "seedsequence-counter", "seed": self.cfg.seed, "step": self.step_count},
        }
        arrays = {f"param/{k}": p.data for k, p in self.model.parameters().items()}
        arrays.update({f"velocity/{k}": v for k, v in self.optimizer.velocity.items()})
        return meta, arrays

    def save(self, path: Path) -> None:
        meta, arrays = self.state()
        save_checkpoint(path, meta, arrays)

    def load(self, path: Path) -> None:
        meta, arrays = load_checkpoint(path)
        params = self.model.parameters()
        for k, p in params.items():
            p.data = arrays[f"param/{k}"].copy()
        self.optimizer.velocity = {k[len("velocity/"):]: v.copy() for k, v in arrays.items() if k.startswith("velocity/")}
        th = meta["threshold"]
        self.thresh = AdaptiveThreshold(th["ema"], th["ema_momentum"], th["tau_floor"], th["tau_ceil"])
        self.step_count = int(meta["step"])

    def test_samples(self) -> list[Sample]:
        return [read_sample(Path(self.cfg.data_dir), i, "test") for i in self.manifest.test_ids]


def model_from_checkpoint(path: Path) -> tuple[TrainConfig, TinySegNet, dict]:
    meta, arrays = load_checkpoint(path)
    if meta.get("backbone") != "TinySegNet":
        raise InputError(f"unsupported backbone {meta.get('backbone')!r} in {path}")
    cfg = TrainConfig.from_dict({**meta["config"], "out_dir": str(Path(path).parent)})
    params = {k[len("param/"):]: Tensor(v, requires_grad=True) for k, v in arrays.items() if k.startswith("param/")}
    return cfg, TinySegNet(params), meta


LOSS_LOG_COLUMNS = ("step", "epoch", *LOSS_KEYS, "tau", "valid_aa", "valid_ab")


def write_loss_log(path: Path, history: Sequence[dict]) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(LOSS_LOG_COLUMNS)
        for rec in history:
            writer.writerow([rec[c] if c in ("step", "epoch") else repr(float(rec[c])) for c in LOSS_LOG_COLUMNS])
