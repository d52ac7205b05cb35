"""Independent reference computations used by the tests.

Everything here is written with plain Python loops and ``math`` so it shares
no code path with the vectorised implementations under test.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np


def numeric_grad(f: Callable[[], float], arr: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``f`` w.r.t. every entry of ``arr`` (perturbed in place)."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat, gflat = arr.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * step)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def conv2d_loops(x: np.ndarray, k: np.ndarray, padding: int) -> np.ndarray:
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    ho, wo = h + 2 * padding - kh + 1, w + 2 * padding - kw + 1
    out = np.zeros((o, ho, wo))
    for oc in range(o):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0
                for ic in range(c):
                    for di in range(kh):
                        for dj in range(kw):
                            yi, xj = i + di - padding, j + dj - padding
                            if 0 <= yi < h and 0 <= xj < w:
                                acc += x[ic, yi, xj] * k[oc, ic, di, dj]
                out[oc, i, j] = acc
    return out


def softmax_pixel(values: Sequence[float]) -> list[float]:
    top = max(values)
    e = [math.exp(v - top) for v in values]
    s = sum(e)
    return [v / s for v in e]


def zscore_flat(values: Sequence[float]) -> list[float]:
    n = len(values)
    mu = sum(values) / n
    sd = math.sqrt(sum((v - mu) ** 2 for v in values) / n)
    return [(v - mu) / sd for v in values]


def supervised_ce(probs: np.ndarray, labels: np.ndarray) -> float:
    """Pixel-mean CE for [C,H,W] probs and [H,W] integer labels."""
    _, h, w = probs.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            total -= math.log(max(probs[labels[i, j], i, j], 1e-12))
    return total / (h * w)


def w2s_ce(strong: np.ndarray, weak: np.ndarray, threshold: float, tau: float | None) -> float:
    """Pixel-mean CE of strong [C,H,W] probs against weak [C,H,W] probs' confident argmax."""
    c, h, w = strong.shape
    total = 0.0
    for i in range(h):
        for j in range(w):
            column = [weak[k, i, j] for k in range(c)]
            conf = max(column)
            cls = column.index(conf)
            if conf > threshold and (tau is None or conf > tau):
                total -= math.log(max(strong[cls, i, j], 1e-12))
    return total / (h * w)


def view_consistency(zw: np.ndarray, zs: np.ndarray) -> float:
    c, h, w = zw.shape
    total = 0.0
    for k in range(c):
        a = zscore_flat([zw[k, i, j] for i in range(h) for j in range(w)])
        b = zscore_flat([zs[k, i, j] for i in range(h) for j in range(w)])
        total += sum((p - q) ** 2 for p, q in zip(a, b))
    return total / (h * w)


def confusion(pred: np.ndarray, gt: np.ndarray) -> tuple[int, int, int, int]:
    tp = tn = fp = fn = 0
    for p, g in zip(pred.reshape(-1).tolist(), gt.reshape(-1).tolist()):
        if p and g:
            tp += 1
        elif not p and not g:
            tn += 1
        elif p:
            fp += 1
        else:
            fn += 1
    return tp, tn, fp, fn


def scores_from_pixels(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    tp, tn, fp, fn = confusion(pred, gt)

    def iou(num, den):
        return 1.0 if den == 0 else num / den

    iou0, iou1 = iou(tn, tn + fn + fp), iou(tp, tp + fp + fn)
    return {"iou0": iou0, "iou1": iou1, "miou": (iou0 + iou1) / 2, "acc": (tp + tn) / (tp + tn + fp + fn)}
