"""Weak/strong view construction and rectangle-mask scene mixing.

Rasters are float arrays laid out channel-first, ``[C, H, W]``, holding
0-255 intensities; label masks are ``[H, W]``. Every function is a pure
function of its inputs, a seed and an :class:`AugConfig`.

Weak augmentation is spatial only (resize, crop, horizontal flip). Strong
augmentation is photometric only and is applied on top of a weak view, so a
strong view stays pixel-aligned with its weak parent and pseudo-labels or
rectangle masks transfer between them without resampling.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, replace
from typing import Union

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ContractError, DimensionError, InputError
from .tensor import Tensor

Seed = Union[int, np.random.SeedSequence, np.random.Generator]

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass(frozen=True)
class AugConfig:
    scale_range: tuple[float, float] = (0.5, 2.0)
    flip_prob: float = 0.5
    jitter_intensity: float = 0.5
    jitter_prob: float = 0.8
    gray_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (0.1, 2.0)
    area_range: tuple[float, float] = (0.02, 0.4)
    aspect_range: tuple[float, float] = (0.3, 1 / 0.3)
    inter_mix_prob: float = 0.5
    intra_mix_prob: float = 0.8
    patch_size: int = 96

    def __post_init__(self):
        for name in ("flip_prob", "jitter_prob", "gray_prob", "blur_prob", "inter_mix_prob", "intra_mix_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ContractError(f"AugConfig.{name} must lie in [0, 1], got {value}")
        for name in ("scale_range", "blur_sigma_range", "area_range", "aspect_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ContractError(f"AugConfig.{name} must satisfy 0 < lo <= hi, got {(lo, hi)}")
        if self.area_range[1] > 1.0:
            raise ContractError(f"AugConfig.area_range upper bound exceeds 1: {self.area_range}")
        if not 0.0 <= self.jitter_intensity < 1.0:
            raise ContractError(f"AugConfig.jitter_intensity must lie in [0, 1), got {self.jitter_intensity}")
        if self.patch_size < 1:
            raise ContractError(f"AugConfig.patch_size must be positive, got {self.patch_size}")

    def without_unlabeled_randomness(self) -> "AugConfig":
        """Copy with every photometric and mixing probability set to zero."""
        return replace(self, jitter_prob=0.0, gray_prob=0.0, blur_prob=0.0, inter_mix_prob=0.0, intra_mix_prob=0.0)


# -- geometry -----------------------------------------------------------------


@dataclass(frozen=True)
class GeomRecord:
    """The spatial transform of one weak view.

    The source raster is resized to ``resized``, reflect-padded at the bottom
    and right up to ``patch`` if needed, cropped at ``crop`` and optionally
    mirrored left-right.
    """

    scale: float
    resized: tuple[int, int]
    crop: tuple[int, int]
    flip: bool
    patch: int


def _src_coords(n_in: int, n_out: int) -> np.ndarray:
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(pos, 0.0, n_in - 1)


def resize_bilinear(raster: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-centred bilinear resize of the last two axes."""
    h, w = raster.shape[-2:]
    if (out_h, out_w) == (h, w):
        return raster.copy()
    ys, xs = _src_coords(h, out_h), _src_coords(w, out_w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1, x1 = np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None]
    wx = xs - x0
    rows0, rows1 = raster[..., y0, :], raster[..., y1, :]
    top = rows0[..., x0] * (1 - wx) + rows0[..., x1] * wx
    bottom = rows1[..., x0] * (1 - wx) + rows1[..., x1] * wx
    return top * (1 - wy) + bottom * wy


def resize_nearest(raster: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = raster.shape[-2:]
    yi = np.minimum(((np.arange(out_h) + 0.5) * h / out_h).astype(int), h - 1)
    xi = np.minimum(((np.arange(out_w) + 0.5) * w / out_w).astype(int), w - 1)
    return raster[..., yi[:, None], xi[None, :]]


def sample_geom(seed: Seed, height: int, width: int, cfg: AugConfig) -> GeomRecord:
    if height <= 0 or width <= 0:
        raise InputError(f"cannot augment a degenerate {height}x{width} raster")
    rng = _rng(seed)
    scale = float(rng.uniform(*cfg.scale_range))
    rh, rw = max(1, int(round(height * scale))), max(1, int(round(width * scale)))
    ph, pw = max(rh, cfg.patch_size), max(rw, cfg.patch_size)
    y0 = int(rng.integers(0, ph - cfg.patch_size + 1))
    x0 = int(rng.integers(0, pw - cfg.patch_size + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    return GeomRecord(scale=scale, resized=(rh, rw), crop=(y0, x0), flip=flip, patch=cfg.patch_size)


def apply_geom(raster: np.ndarray, geom: GeomRecord, nearest: bool = False) -> np.ndarray:
    """Replay ``geom`` on a [C,H,W] image (bilinear) or an [H,W] mask (``nearest``)."""
    if raster.size == 0:
        raise InputError(f"cannot augment a degenerate raster of shape {raster.shape}")
    rh, rw = geom.resized
    out = resize_nearest(raster, rh, rw) if nearest else resize_bilinear(raster, rh, rw)
    pad_h, pad_w = max(0, geom.patch - rh), max(0, geom.patch - rw)
    if pad_h or pad_w:
        widths = [(0, 0)] * (out.ndim - 2) + [(0, pad_h), (0, pad_w)]
        out = np.pad(out, widths, mode="reflect" if min(rh, rw) > 1 else "edge")
    y0, x0 = geom.crop
    out = out[..., y0 : y0 + geom.patch, x0 : x0 + geom.patch]
    if geom.flip:
        out = out[..., ::-1]
    return np.ascontiguousarray(out)


def weak_augment(image: np.ndarray, rng_seed: Seed, cfg: AugConfig) -> tuple[np.ndarray, GeomRecord]:
    """Random resize, crop to ``cfg.patch_size`` and flip; returns the view and its record."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or 0 in image.shape:
        raise InputError(f"weak_augment expects a non-empty [C,H,W] raster, got shape {image.shape}")
    geom = sample_geom(rng_seed, image.shape[1], image.shape[2], cfg)
    return apply_geom(image, geom), geom


# -- photometric --------------------------------------------------------------


def to_gray(image: np.ndarray) -> np.ndarray:
    return np.tensordot(GRAY_WEIGHTS, image, axes=(0, 0))


def color_jitter(image: np.ndarray, rng: np.random.Generator, intensity: float) -> np.ndarray:
    """Brightness, contrast and saturation, each scaled by U[1 - i, 1 + i]."""
    lo, hi = 1.0 - intensity, 1.0 + intensity
    brightness, contrast, saturation = rng.uniform(lo, hi, size=3)
    out = np.clip(image * brightness, 0.0, 255.0)
    mean_gray = to_gray(out).mean()
    out = np.clip((out - mean_gray) * contrast + mean_gray, 0.0, 255.0)
    gray = to_gray(out)
    return np.clip(gray + (out - gray) * saturation, 0.0, 255.0)


def gaussian_kernel(sigma: float) -> np.ndarray:
    radius = max(1, math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(image: np.ndarray, sigma: float) -> np.ndarray:
    k = gaussian_kernel(sigma)
    out = correlate1d(image, k, axis=-1, mode="reflect")
    return correlate1d(out, k, axis=-2, mode="reflect")


def strong_augment(weak_view: np.ndarray, rng_seed: Seed, cfg: AugConfig) -> np.ndarray:
    """Photometric perturbation of a weak view. Never moves pixels."""
    rng = _rng(rng_seed)
    out = np.array(weak_view, dtype=np.float64)
    if rng.random() < cfg.jitter_prob:
        out = color_jitter(out, rng, cfg.jitter_intensity)
    if rng.random() < cfg.gray_prob:
        out = np.broadcast_to(to_gray(out), out.shape).copy()
    if rng.random() < cfg.blur_prob:
        out = gaussian_blur(out, float(rng.uniform(*cfg.blur_sigma_range)))
    return out


# -- rectangle masks and mixing -------------------------------------------------


@dataclass(frozen=True)
class RectMask:
    """Axis-aligned rectangle ``[y0, y0+h) x [x0, x0+w)`` inside an HxW image."""

    x0: int
    y0: int
    w: int
    h: int
    height: int
    width: int

    def __post_init__(self):
        if not (0 <= self.x0 and 0 <= self.y0 and self.x0 + self.w <= self.width and self.y0 + self.h <= self.height):
            raise ContractError(f"rectangle {self} leaves the image")

    @classmethod
    def full(cls, height: int, width: int) -> "RectMask":
        return cls(0, 0, width, height, height, width)

    @property
    def area_ratio(self) -> float:
        return self.w * self.h / (self.height * self.width)

    @property
    def aspect(self) -> float:
        return self.w / self.h

    @functools.cached_property
    def as_grid(self) -> np.ndarray:
        grid = np.zeros((self.height, self.width))
        grid[self.y0 : self.y0 + self.h, self.x0 : self.x0 + self.w] = 1.0
        grid.setflags(write=False)
        return grid

    def complement_grid(self) -> np.ndarray:
        return 1.0 - self.as_grid


def _rect_fits(w: int, h: int, height: int, width: int, area_range, aspect_range) -> bool:
    if not (1 <= w <= width and 1 <= h <= height):
        return False
    ratio = w * h / (height * width)
    return area_range[0] <= ratio <= area_range[1] and aspect_range[0] <= w / h <= aspect_range[1]


def sample_rect_mask(
    rng_seed: Seed,
    height: int,
    width: int,
    area_range: tuple[float, float] = (0.02, 0.4),
    aspect_range: tuple[float, float] = (0.3, 1 / 0.3),
    max_tries: int = 10,
) -> RectMask:
    """Rectangle with uniform area ratio and uniform aspect (w/h), placed uniformly.

    The aspect is drawn from the part of ``aspect_range`` in which a
    rectangle of the drawn area fits inside the image.

    The continuous size is rounded to whichever neighbouring integer size
    keeps both ratios in range and is closest in area. After ``max_tries``
    failures the largest in-range square is used.
    """
    if height < 8 or width < 8:
        raise ContractError(f"sample_rect_mask needs H, W >= 8, got {height}x{width}")
    rng = _rng(rng_seed)
    total = height * width
    size = None
    for _ in range(max_tries):
        area = rng.uniform(*area_range) * total
        # restrict the aspect draw to shapes that fit, so large areas are not rejected more often
        lo = max(aspect_range[0], area / height**2)
        hi = min(aspect_range[1], width**2 / area)
        aspect = rng.uniform(lo, hi) if lo <= hi else rng.uniform(*aspect_range)
        wf, hf = math.sqrt(area * aspect), math.sqrt(area / aspect)
        candidates = [
            (w, h)
            for w in (math.floor(wf), math.ceil(wf))
            for h in (math.floor(hf), math.ceil(hf))
            if _rect_fits(w, h, height, width, area_range, aspect_range)
        ]
        if candidates:
            size = min(candidates, key=lambda c: abs(c[0] * c[1] - area))
            break
    if size is None:
        side = min(height, width, math.isqrt(int(area_range[1] * total)))
        size = (side, side)
    w, h = size
    x0 = int(rng.integers(0, width - w + 1))
    y0 = int(rng.integers(0, height - h + 1))
    return RectMask(x0, y0, w, h, height, width)


def _grid(mask) -> np.ndarray:
    return mask.as_grid if isinstance(mask, RectMask) else np.asarray(mask, dtype=np.float64)


def mix(a, b, mask):
    """``mask * a + (1 - mask) * b`` for numpy rasters or Tensors.

    ``mask`` is a :class:`RectMask` or a binary [H,W] grid; it broadcasts
    over any leading channel/batch axes.
    """
    grid = _grid(mask)
    if a.shape != b.shape:
        raise DimensionError(f"mix: operand shapes differ, {a.shape} vs {b.shape}")
    if a.shape[-2:] != grid.shape:
        raise DimensionError(f"mix: operand spatial shape {a.shape[-2:]} does not match mask {grid.shape}")
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return grid * a + (1.0 - grid) * b
    return np.where(grid.astype(bool), a, b)


# -- view bundles -------------------------------------------------------------


@dataclass
class ViewBundle:
    w1a: np.ndarray
    w2a: np.ndarray
    wb: np.ndarray
    s1a: np.ndarray
    s2a: np.ndarray
    sb: np.ndarray
    aa: np.ndarray
    ab: np.ndarray
    m1: RectMask
    m2: RectMask
    apply_intra: bool
    apply_inter: bool
    geoms: dict[str, GeomRecord] = field(default_factory=dict)

    VIEW_NAMES = ("w1a", "w2a", "wb", "s1a", "s2a", "sb", "aa", "ab")


def make_views(xa: np.ndarray, xb: np.ndarray, rng_seed: Seed, cfg: AugConfig) -> ViewBundle:
    """Three weak views, their strong children, and the two mixed composites.

    ``aa`` mixes the two strong views of ``xa`` inside M1; ``ab`` mixes the
    second strong view of ``xa`` with the strong view of ``xb`` inside M2.
    A mix whose probability coin fails gets a full-image mask, so the
    composite is just its first operand.
    """
    ss = rng_seed if isinstance(rng_seed, np.random.SeedSequence) else np.random.SeedSequence(rng_seed)
    seeds = ss.spawn(9)
    w1a, g1a = weak_augment(xa, seeds[0], cfg)
    w2a, g2a = weak_augment(xa, seeds[1], cfg)
    wb, gb = weak_augment(xb, seeds[2], cfg)
    s1a = strong_augment(w1a, seeds[3], cfg)
    s2a = strong_augment(w2a, seeds[4], cfg)
    sb = strong_augment(wb, seeds[5], cfg)

    p = cfg.patch_size
    m1 = sample_rect_mask(seeds[6], p, p, cfg.area_range, cfg.aspect_range)
    m2 = sample_rect_mask(seeds[7], p, p, cfg.area_range, cfg.aspect_range)
    coins = np.random.default_rng(seeds[8]).random(2)
    apply_intra = bool(coins[0] < cfg.intra_mix_prob)
    apply_inter = bool(coins[1] < cfg.inter_mix_prob)
    if not apply_intra:
        m1 = RectMask.full(p, p)
    if not apply_inter:
        m2 = RectMask.full(p, p)

    return ViewBundle(
        w1a=w1a, w2a=w2a, wb=wb, s1a=s1a, s2a=s2a, sb=sb,
        aa=mix(s1a, s2a, m1), ab=mix(s2a, sb, m2),
        m1=m1, m2=m2, apply_intra=apply_intra, apply_inter=apply_inter,
        geoms={"w1a": g1a, "w2a": g2a, "wb": gb, "s1a": g1a, "s2a": g2a, "sb": gb},
    )
