"""Raster tiling, labeled-subset sampling, normalisation and synthetic scenes.

On-disk dataset layout::

    <root>/raw/images/<scene>.png      full scenes written by ``synth``
    <root>/raw/masks/<scene>.png
    <root>/images/<id>.png             8-bit RGB patches
    <root>/masks/<id>.png              8-bit gray, 0 = clear, 255 = cloud
    <root>/splits/<seed>/1_4.manifest  "labeled|unlabeled|test<TAB>id" lines
    <root>/splits/<seed>/norm_stats.txt
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .augment import gaussian_blur, resize_bilinear
from .errors import ContractError, InputError

log = logging.getLogger(__name__)

SPLITS = ("labeled", "unlabeled", "test")
RATIOS = ("1/4", "1/8", "1/16")
NORM_EPS = 1e-6


@dataclass
class Sample:
    id: str
    image: np.ndarray  # [3, H, W] uint8
    mask: np.ndarray | None = None  # [H, W] uint8 in {0, 1}
    split: str = "unlabeled"

    def __post_init__(self):
        if self.split not in SPLITS:
            raise ContractError(f"unknown split {self.split!r}")
        if self.mask is not None and self.mask.shape != self.image.shape[1:]:
            raise ContractError(f"sample {self.id}: mask {self.mask.shape} does not match image {self.image.shape}")


# -- tiling -------------------------------------------------------------------


def tile_raster(image: np.ndarray, mask: np.ndarray | None, patch: int, prefix: str = "tile", split: str = "unlabeled") -> list[Sample]:
    """Non-overlapping ``patch``-sized tiles in row-major order; borders are dropped."""
    if patch < 8:
        raise ContractError(f"patch size must be >= 8, got {patch}")
    _, h, w = image.shape
    rows, cols = h // patch, w // patch
    if rows == 0 or cols == 0:
        warnings.warn(f"{prefix}: {h}x{w} raster is smaller than patch {patch}; no tiles produced", stacklevel=2)
        return []
    tiles = []
    for r in range(rows):
        for c in range(cols):
            ys, xs = slice(r * patch, (r + 1) * patch), slice(c * patch, (c + 1) * patch)
            tiles.append(
                Sample(
                    id=f"{prefix}_r{r:02d}c{c:02d}",
                    image=image[:, ys, xs].copy(),
                    mask=None if mask is None else mask[ys, xs].copy(),
                    split=split,
                )
            )
    return tiles


# -- splits -------------------------------------------------------------------


@dataclass(frozen=True)
class SplitManifest:
    ratio: str
    seed: int
    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    test_ids: tuple[str, ...]

    def to_text(self) -> str:
        lines = [f"{split}\t{i}" for split, ids in zip(SPLITS, (self.labeled_ids, self.unlabeled_ids, self.test_ids)) for i in ids]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, ratio: str, seed: int) -> "SplitManifest":
        groups: dict[str, list[str]] = {s: [] for s in SPLITS}
        for n, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            split, _, sample_id = line.partition("\t")
            if split not in groups or not sample_id:
                raise InputError(f"manifest line {n}: expected '<split>\\t<id>', got {line!r}")
            groups[split].append(sample_id)
        return cls(ratio, seed, *(tuple(groups[s]) for s in SPLITS))


def ratio_fraction(ratio: str) -> float:
    num, _, den = ratio.partition("/")
    return int(num) / int(den)


def ratio_filename(ratio: str) -> str:
    return ratio.replace("/", "_") + ".manifest"


def hierarchical_split(ids: Sequence[str], seed: int, test_ids: Sequence[str] = ()) -> dict[str, SplitManifest]:
    """Nested labeled subsets: 1/16 inside 1/8 inside 1/4 of ``ids``.

    The 1/4 set is drawn uniformly without replacement; each smaller set is a
    uniform draw of ``floor(len(ids) * ratio)`` ids from its parent. Ids keep
    their input order inside every list.
    """
    ids = list(ids)
    if len(set(ids)) != len(ids):
        raise InputError("hierarchical_split: duplicate ids")
    if set(ids) & set(test_ids):
        raise InputError("hierarchical_split: training and test ids overlap")
    if len(ids) < 16:
        raise ContractError(f"hierarchical_split needs at least 16 ids, got {len(ids)}")
    rng = np.random.default_rng(seed)
    position = {sample_id: n for n, sample_id in enumerate(ids)}
    parent = ids
    manifests = {}
    for ratio in RATIOS:
        k = int(len(ids) * ratio_fraction(ratio))
        chosen = rng.choice(len(parent), size=k, replace=False)
        labeled = sorted((parent[i] for i in chosen), key=position.__getitem__)
        labeled_set = set(labeled)
        manifests[ratio] = SplitManifest(
            ratio=ratio,
            seed=seed,
            labeled_ids=tuple(labeled),
            unlabeled_ids=tuple(i for i in ids if i not in labeled_set),
            test_ids=tuple(test_ids),
        )
        parent = labeled
    return manifests


# -- normalisation ------------------------------------------------------------


@dataclass(frozen=True)
class NormStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]

    def to_text(self) -> str:
        return "mean " + " ".join(repr(float(v)) for v in self.mean) + "\nstd " + " ".join(repr(float(v)) for v in self.std) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "NormStats":
        fields = dict(line.split(" ", 1) for line in text.splitlines() if line.strip())
        try:
            mean = tuple(float(v) for v in fields["mean"].split())
            std = tuple(float(v) for v in fields["std"].split())
        except (KeyError, ValueError) as exc:
            raise InputError(f"malformed norm stats: {exc}") from None
        return cls(mean, std)  # type: ignore[arg-type]


def compute_norm_stats(images: Iterable[np.ndarray]) -> NormStats:
    """Per-channel population mean and std over every pixel of every image."""
    pixels = [np.asarray(image, dtype=np.float64).reshape(3, -1) for image in images]
    if not pixels:
        raise ContractError("compute_norm_stats needs at least one image")
    pool = np.concatenate(pixels, axis=1)
    mean = pool.mean(axis=1)
    std = pool.std(axis=1)
    std = np.where(std > NORM_EPS, std, 1.0)
    return NormStats(tuple(mean.tolist()), tuple(std.tolist()))  # type: ignore[arg-type]


def apply_norm(image: np.ndarray, stats: NormStats) -> np.ndarray:
    mean = np.asarray(stats.mean)[:, None, None]
    std = np.asarray(stats.std)[:, None, None]
    return (np.asarray(image, dtype=np.float64) - mean) / std


def invert_norm(image: np.ndarray, stats: NormStats) -> np.ndarray:
    return np.asarray(image) * np.asarray(stats.std)[:, None, None] + np.asarray(stats.mean)[:, None, None]


# -- synthetic scenes ------------------------------------------------------------

# (low, mid, high) surface colours for the eight land-cover types.
PALETTES: dict[str, tuple[tuple[int, int, int], ...]] = {
    "barren": ((150, 122, 92), (192, 162, 124), (228, 204, 170)),
    "forest": ((22, 50, 26), (42, 82, 42), (74, 112, 62)),
    "grass_crops": ((78, 108, 48), (128, 150, 72), (182, 172, 112)),
    "shrubland": ((108, 98, 70), (150, 136, 102), (188, 172, 138)),
    "snow_ice": ((168, 178, 194), (212, 220, 232), (244, 247, 252)),
    "urban": ((88, 88, 94), (140, 136, 130), (196, 190, 184)),
    "water": ((14, 34, 70), (26, 60, 100), (52, 92, 132)),
    "wetland": ((40, 70, 58), (72, 100, 80), (112, 132, 102)),
}
BIOMES = tuple(PALETTES)


def value_noise(rng: np.random.Generator, height: int, width: int, octaves: int, base_cells: int, persistence: float = 0.5) -> np.ndarray:
    """Multi-octave bilinear value noise, rescaled to [0, 1]."""
    field = np.zeros((height, width))
    amp = 1.0
    for octave in range(octaves):
        cells = base_cells * 2**octave
        lattice = rng.random((cells + 1, cells + 1))
        field += amp * resize_bilinear(lattice, height, width)
        amp *= persistence
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo) if hi > lo else np.zeros_like(field)


def _ramp(t: np.ndarray, stops: np.ndarray) -> np.ndarray:
    lo, mid, hi = stops
    first = t < 0.5
    u = np.where(first, t * 2, (t - 0.5) * 2)[None]
    return np.where(first[None], lo[:, None, None] * (1 - u) + mid[:, None, None] * u, mid[:, None, None] * (1 - u) + hi[:, None, None] * u)


def generate_synthetic_scene(
    rng_seed,
    height: int,
    width: int,
    cloud_cover: float,
    biome: str | None = None,
    scene_id: str = "scene",
) -> Sample:
    """A value-noise terrain with alpha-composited clouds and an exact cloud mask.

    ``cloud_cover`` is clamped to [0.05, 0.95]. Cloud support is the set of
    pixels where a smooth noise field exceeds its ``1 - cover`` quantile;
    opacity ramps up from a thin-cloud floor at the blob edge.
    """
    rng = np.random.default_rng(rng_seed)
    cover = float(np.clip(cloud_cover, 0.05, 0.95))
    if biome is None:
        biome = BIOMES[int(rng.integers(len(BIOMES)))]
    stops = np.asarray(PALETTES[biome], dtype=np.float64) * rng.uniform(0.85, 1.15, size=(1, 3))

    terrain = value_noise(rng, height, width, octaves=5, base_cells=3, persistence=0.55)
    ground = _ramp(terrain, stops) + rng.normal(0.0, 4.0, size=(3, height, width))

    field = value_noise(rng, height, width, octaves=4, base_cells=2, persistence=0.5)
    field = gaussian_blur(field, 1.0)
    n_cloud = max(1, int(round(cover * field.size)))
    mask = np.zeros(field.size, dtype=bool)
    mask[np.argsort(field, axis=None, kind="stable")[-n_cloud:]] = True
    mask = mask.reshape(field.shape)
    threshold = field[mask].min()

    peak = field.max()
    ramp = np.clip((field - threshold) / max(0.35 * (peak - threshold), 1e-9), 0.0, 1.0)
    opacity = rng.uniform(0.7, 1.0)
    thin_floor = rng.uniform(0.2, 0.4)
    alpha = np.where(mask, thin_floor + (opacity - thin_floor) * np.sqrt(ramp), 0.0)[None]
    shade = value_noise(rng, height, width, octaves=3, base_cells=4)
    cloud_rgb = 255.0 * (0.86 + 0.12 * shade)[None] * np.array([0.98, 0.99, 1.0])[:, None, None]

    image = (1.0 - alpha) * ground + alpha * cloud_rgb
    image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    return Sample(id=scene_id, image=image, mask=mask.astype(np.uint8), split="unlabeled")


# -- disk layout ----------------------------------------------------------------


def save_png_rgb(path: Path, image: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.ascontiguousarray(np.transpose(image, (1, 2, 0))).astype(np.uint8), mode="RGB").save(path)


def load_png_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.transpose(np.asarray(im.convert("RGB")), (2, 0, 1)).copy()


def save_png_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path)


def load_png_mask(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.uint8)


def write_samples(root: Path, samples: Iterable[Sample]) -> None:
    for s in samples:
        save_png_rgb(root / "images" / f"{s.id}.png", s.image)
        if s.mask is not None:
            save_png_mask(root / "masks" / f"{s.id}.png", s.mask)


def read_sample(root: Path, sample_id: str, split: str = "unlabeled") -> Sample:
    image_path = root / "images" / f"{sample_id}.png"
    if not image_path.exists():
        raise InputError(f"missing image {image_path}")
    mask_path = root / "masks" / f"{sample_id}.png"
    mask = load_png_mask(mask_path) if mask_path.exists() else None
    return Sample(id=sample_id, image=load_png_rgb(image_path), mask=mask, split=split)


def synthesize_dataset(root: Path, n_scenes: int, size: int, seed: int, cover_range: tuple[float, float] = (0.05, 0.7)) -> list[str]:
    """Write ``n_scenes`` synthetic scenes under ``root/raw``, biomes cycling evenly."""
    root = Path(root)
    ids = []
    for i in range(n_scenes):
        ss = np.random.SeedSequence([seed, i])
        cover = float(np.random.default_rng(ss.spawn(1)[0]).uniform(*cover_range))
        scene = generate_synthetic_scene(ss, size, size, cover, biome=BIOMES[i % len(BIOMES)], scene_id=f"scene{i:04d}")
        write_samples(root / "raw", [scene])
        ids.append(scene.id)
    log.info("wrote %d synthetic scenes to %s", n_scenes, root / "raw")
    return ids


def prepare_dataset(root: Path, patch: int, seed: int, test_frac: float = 0.25, test_seed: int = 0) -> dict[str, SplitManifest]:
    """Tile raw scenes, hold out whole test scenes, write manifests and norm stats.

    Test scenes are chosen by ``test_seed`` alone, so every split seed sees
    the same test set.
    """
    root = Path(root)
    scene_ids = sorted(p.stem for p in (root / "raw" / "images").glob("*.png"))
    if not scene_ids:
        raise InputError(f"no raw scenes under {root / 'raw' / 'images'}")
    n_test = int(round(test_frac * len(scene_ids)))
    test_pick = np.random.default_rng(test_seed).choice(len(scene_ids), size=n_test, replace=False)
    test_scenes = {scene_ids[i] for i in test_pick}

    train_ids, test_ids, train_images = [], [], []
    for scene in scene_ids:
        raw = read_sample(root / "raw", scene)
        tiles = tile_raster(raw.image, raw.mask, patch, prefix=scene)
        write_samples(root, tiles)
        for t in tiles:
            if scene in test_scenes:
                test_ids.append(t.id)
            else:
                train_ids.append(t.id)
                train_images.append(t.image)

    manifests = hierarchical_split(train_ids, seed, test_ids)
    split_dir = root / "splits" / str(seed)
    split_dir.mkdir(parents=True, exist_ok=True)
    for ratio, manifest in manifests.items():
        (split_dir / ratio_filename(ratio)).write_text(manifest.to_text(), encoding="utf-8")
    (split_dir / "norm_stats.txt").write_text(compute_norm_stats(train_images).to_text(), encoding="utf-8")
    log.info("prepared %d train / %d test patches, split seed %d", len(train_ids), len(test_ids), seed)
    return manifests


def load_split(root: Path, seed: int, ratio: str) -> tuple[SplitManifest, NormStats]:
    split_dir = Path(root) / "splits" / str(seed)
    path = split_dir / ratio_filename(ratio)
    if not path.exists():
        raise InputError(f"no manifest {path}; run `prepare --seed {seed}` first")
    manifest = SplitManifest.from_text(path.read_text(encoding="utf-8"), ratio, seed)
    stats = NormStats.from_text((split_dir / "norm_stats.txt").read_text(encoding="utf-8"))
    return manifest, stats
