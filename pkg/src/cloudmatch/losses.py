"""Supervised, weak-to-strong and view-consistency losses plus pseudo-labels.

All per-pixel losses are mean-reduced over pixels (and over the batch when a
leading batch axis is present) so their weights do not depend on patch size.
Inputs are ``[2,H,W]`` or ``[N,2,H,W]`` tensors.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .augment import RectMask, mix
from .errors import ContractError, DimensionError
from .tensor import Tensor, clip, log, zscore_normalize

PROB_FLOOR = 1e-12


def _pixel_count(t: Tensor | np.ndarray) -> int:
    shape = t.shape
    return int(np.prod(shape)) // shape[-3]


def _log_probs(probs: Tensor) -> Tensor:
    return log(clip(probs, PROB_FLOOR, 1.0))


def supervised_loss(probs: Tensor, target) -> Tensor:
    """Pixel-mean cross-entropy of ``probs`` against a one-hot ``target``."""
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=np.float64)
    if t.shape != probs.shape:
        raise DimensionError(f"supervised_loss: probs {probs.shape} vs target {t.shape}")
    if not (np.isin(t, (0.0, 1.0)).all() and (t.sum(axis=-3) == 1.0).all()):
        raise ContractError("supervised_loss: target is not one-hot along the channel axis")
    return -(_log_probs(probs) * t).sum() / _pixel_count(t)


def one_hot(labels: np.ndarray, num_classes: int = 2) -> np.ndarray:
    """[..., H, W] integer labels to [..., C, H, W] float one-hot."""
    labels = np.asarray(labels)
    out = (labels[..., None, :, :] == np.arange(num_classes)[:, None, None]).astype(np.float64)
    return out


@dataclass(frozen=True)
class PseudoLabelMap:
    hard: np.ndarray  # [..., H, W] int, argmax class (ties -> 0)
    confidence: np.ndarray  # [..., H, W] max class probability
    valid: np.ndarray  # [..., H, W] bool, confidence > threshold

    @property
    def valid_fraction(self) -> float:
        return float(self.valid.mean())


def make_pseudolabel(weak_probs, threshold: float = 0.5) -> PseudoLabelMap:
    """Hard labels from (detached) weak-view probabilities.

    A pixel is valid only if its top probability strictly exceeds ``threshold``.
    """
    p = weak_probs.data if isinstance(weak_probs, Tensor) else np.asarray(weak_probs, dtype=np.float64)
    hard = p.argmax(axis=-3)
    confidence = p.max(axis=-3)
    return PseudoLabelMap(hard=hard, confidence=confidence, valid=confidence > threshold)


def mix_weak_features(zw1a, zw2a, zwb, m1: RectMask, m2: RectMask) -> tuple[Tensor, Tensor]:
    """Composite weak-view logits with the same masks used for the strong views."""
    zw1a, zw2a, zwb = (z.detach() if isinstance(z, Tensor) else Tensor(z) for z in (zw1a, zw2a, zwb))
    return mix(zw1a, zw2a, m1), mix(zw2a, zwb, m2)


CONF_SOURCES = ("weak", "strong")


def w2s_loss(strong_probs: Tensor, plabel: PseudoLabelMap, tau: float | None = None, conf_source: str = "weak") -> Tensor:
    """Cross-entropy of strong-view predictions against confident pseudo-labels.

    Pixels count when the pseudo-label is valid and, if ``tau`` is given,
    when the confidence taken from ``conf_source`` also exceeds ``tau``
    (``"weak"``: the pseudo-label source; ``"strong"``: the strong view's own
    top probability, detached).
    """
    if strong_probs.shape[-2:] != plabel.hard.shape[-2:] or strong_probs.shape[:-3] != plabel.hard.shape[:-2]:
        raise DimensionError(f"w2s_loss: strong probs {strong_probs.shape} vs pseudo-labels {plabel.hard.shape}")
    if conf_source not in CONF_SOURCES:
        raise ContractError(f"w2s_loss: conf_source must be one of {CONF_SOURCES}, got {conf_source!r}")
    valid = plabel.valid
    if tau is not None:
        conf = plabel.confidence if conf_source == "weak" else strong_probs.data.max(axis=-3)
        valid = valid & (conf > tau)
    weights = one_hot(plabel.hard, strong_probs.shape[-3]) * valid[..., None, :, :]
    return -(_log_probs(strong_probs) * weights).sum() / _pixel_count(strong_probs)


def view_consistency_loss(zw, zs: Tensor) -> Tensor:
    """Sum over classes of the pixel-mean squared gap between z-scored logits.

    Each class plane of each image is standardised on its own; ``zw`` is
    treated as a constant target.
    """
    zw = zw.detach() if isinstance(zw, Tensor) else Tensor(zw)
    if zw.shape != zs.shape:
        raise DimensionError(f"view_consistency_loss: shapes {zw.shape} and {zs.shape} differ")
    diff = zscore_normalize(zw) - zscore_normalize(zs)
    return (diff * diff).sum() / _pixel_count(zs)


@dataclass(frozen=True)
class LossWeights:
    lambda_w2s: float = 0.5
    lambda_vc: float = 0.5

    def __post_init__(self):
        if self.lambda_w2s < 0 or self.lambda_vc < 0:
            raise ContractError(f"loss weights must be non-negative, got {self}")


def total_loss(sup, w2s_aa, w2s_ab, vc_aa, vc_ab, weights: LossWeights):
    if weights.lambda_w2s < 0 or weights.lambda_vc < 0:
        raise ContractError(f"loss weights must be non-negative, got {weights}")
    return sup + weights.lambda_w2s * (w2s_aa + w2s_ab) + weights.lambda_vc * (vc_aa + vc_ab)


@dataclass(frozen=True)
class AdaptiveThreshold:
    """Global EMA of mean top-class confidence, clamped into ``[tau_floor, tau_ceil]``."""

    ema: float = 0.5
    ema_momentum: float = 0.999
    tau_floor: float = 0.5
    tau_ceil: float = 0.99

    @property
    def tau(self) -> float:
        return min(max(self.ema, self.tau_floor), self.tau_ceil)


def update_adaptive_threshold(state: AdaptiveThreshold, weak_confidences) -> AdaptiveThreshold:
    m = state.ema_momentum
    ema = m * state.ema + (1.0 - m) * float(np.mean(weak_confidences))
    return AdaptiveThreshold(ema=ema, ema_momentum=m, tau_floor=state.tau_floor, tau_ceil=state.tau_ceil)
