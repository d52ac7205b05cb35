"""Pooled confusion counts and the IoU / accuracy scores derived from them."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    merge = __add__


def _binary(name: str, values) -> np.ndarray:
    arr = np.asarray(values)
    if not np.isin(arr, (0, 1)).all():
        raise ContractError(f"{name} must be binary (0 = clear, 1 = cloud)")
    return arr.astype(bool)


def accumulate(counts: ConfusionCounts, pred, gt) -> ConfusionCounts:
    p, g = _binary("pred", pred), _binary("gt", gt)
    if p.shape != g.shape:
        raise DimensionError(f"accumulate: pred {p.shape} vs gt {g.shape}")
    tp = int(np.count_nonzero(p & g))
    tn = int(np.count_nonzero(~p & ~g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return counts + ConfusionCounts(tp, tn, fp, fn)


def _ratio(num: int, den: int) -> float:
    # An absent class that is never predicted counts as perfectly segmented.
    return 1.0 if den == 0 else num / den


def scores(counts: ConfusionCounts) -> dict[str, float]:
    if counts.total == 0:
        raise ContractError("scores: no pixels have been accumulated")
    iou0 = _ratio(counts.tn, counts.tn + counts.fn + counts.fp)
    iou1 = _ratio(counts.tp, counts.tp + counts.fp + counts.fn)
    return {
        "iou0": iou0,
        "iou1": iou1,
        "miou": (iou0 + iou1) / 2,
        "acc": (counts.tp + counts.tn) / counts.total,
    }
