"""Synthetic multi-resolution pyramids, tissue masking, tile sampling and crops.

A pyramid stands in for a whole-slide image: four levels at 0.25, 0.5, 1.0
and 2.0 microns per pixel, each the 2x2 box-mean of the level above it.
Rasters are float32 arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .errors import InvalidArgumentError, SamplingError

logger = logging.getLogger(__name__)

LEVEL_MPP = (0.25, 0.5, 1.0, 2.0)
N_LEVELS = 4
MAX_PATCH = 32
TEXTURES = ("stripes", "dots", "checker")
# level-0 period in pixels, one per texture class
TEXTURE_PERIOD = {"stripes": 12.0, "dots": 16.0, "checker": 20.0}

GLOBAL_CROP = 224
LOCAL_CROP = 96
N_GLOBAL = 2
N_LOCAL = 4
MAX_RESAMPLE = 100


@dataclass
class PyramidImage:
    levels: list
    mpp_per_level: tuple = LEVEL_MPP
    texture_label: Optional[int] = None
    seed: Optional[int] = None

    @property
    def base_size(self) -> int:
        return self.levels[0].shape[0]

    def level_shape(self, level: int) -> tuple:
        return self.levels[level].shape[:2]


@dataclass
class TissueMask:
    grid: np.ndarray
    threshold: float
    degenerate: bool = False

    @property
    def foreground_fraction(self) -> float:
        return float(self.grid.mean()) if self.grid.size else 0.0


@dataclass
class TileSample:
    pixels: np.ndarray
    mpp: float
    origin: tuple  # (level, x, y) of the top-left corner in level coordinates
    label: Optional[int] = None

    @property
    def center(self) -> tuple:
        level, x, y = self.origin
        h, w = self.pixels.shape[:2]
        return x + w // 2, y + h // 2


@dataclass
class CropSet:
    global_crops: list = field(default_factory=list)
    local_crops: list = field(default_factory=list)
    label: Optional[int] = None


def texture_id(texture_class) -> int:
    if isinstance(texture_class, str):
        if texture_class not in TEXTURES:
            raise InvalidArgumentError(f"unknown texture class {texture_class!r}")
        return TEXTURES.index(texture_class)
    cid = int(texture_class)
    if not 0 <= cid < len(TEXTURES):
        raise InvalidArgumentError(f"texture class id {cid} outside 0..{len(TEXTURES) - 1}")
    return cid


def box_downsample(raster: np.ndarray) -> np.ndarray:
    """2x2 area average; exact mean conservation for even-sized rasters."""
    r = raster.astype(np.float64)
    total = r[0::2, 0::2] + r[0::2, 1::2] + r[1::2, 0::2] + r[1::2, 1::2]
    return (total * 0.25).astype(np.float32)


def _arcsine_quantiles(n: int) -> np.ndarray:
    u = (np.arange(n) + 0.5) / n
    return 0.5 - 0.5 * np.cos(np.pi * u)


def _match_marginal(pattern: np.ndarray) -> np.ndarray:
    # Give every texture the marginal distribution of a sinusoid, so classes
    # differ only in spatial structure and not in first-order statistics.
    flat = pattern.ravel()
    order = np.argsort(flat)
    out = np.empty_like(flat)
    out[order] = _arcsine_quantiles(flat.size)
    return out.reshape(pattern.shape)


def _texture(name: str, size: int, rng: np.random.Generator) -> np.ndarray:
    period = TEXTURE_PERIOD[name] * rng.uniform(0.9, 1.1)
    theta = rng.uniform(0, np.pi)
    phase = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    u = xx * np.cos(theta) + yy * np.sin(theta)
    v = -xx * np.sin(theta) + yy * np.cos(theta)
    k = 2 * np.pi / period
    if name == "stripes":
        pattern = np.sin(k * u + phase[0])
    elif name == "dots":
        du = np.cos(k * u + phase[0])
        dv = np.cos(k * v + phase[1])
        pattern = np.exp(2.0 * (du + dv))
    else:
        pattern = np.sin(k * u + phase[0]) * np.sin(k * v + phase[1])
    return _match_marginal(pattern)


def _tissue_region(size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    region = np.zeros((size, size), dtype=bool)
    for _ in range(rng.integers(2, 5)):
        cx, cy = rng.uniform(0.3, 0.7, size=2)
        ax, ay = rng.uniform(0.2, 0.4, size=2)
        region |= ((xx - cx) / ax) ** 2 + ((yy - cy) / ay) ** 2 <= 1.0
    return region


def build_synthetic_pyramid(seed: int, base_size: int = 768, texture_class=0) -> PyramidImage:
    """Deterministically synthesize a four-level textured pyramid."""
    if base_size <= 0 or base_size % (2 ** (N_LEVELS - 1) * MAX_PATCH):
        raise InvalidArgumentError(
            f"base_size must be a positive multiple of {2 ** (N_LEVELS - 1) * MAX_PATCH}, got {base_size}"
        )
    cid = texture_id(texture_class)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), cid, int(base_size)]))

    pattern = _texture(TEXTURES[cid], base_size, rng)
    light = np.array([0.86, 0.62, 0.76]) + rng.uniform(-0.04, 0.04, size=3)
    dark = np.array([0.38, 0.22, 0.52]) + rng.uniform(-0.04, 0.04, size=3)
    tissue = light + (dark - light) * pattern[..., None]
    background = np.full(3, 0.94) + rng.uniform(-0.01, 0.01, size=3)
    region = _tissue_region(base_size, rng)[..., None]
    img = np.where(region, tissue, background).astype(np.float32)
    img += 0.02 * rng.standard_normal(size=img.shape, dtype=np.float32)
    level0 = np.clip(img, 0.0, 1.0)

    levels = [level0]
    for _ in range(N_LEVELS - 1):
        levels.append(box_downsample(levels[-1]))
    return PyramidImage(levels=levels, mpp_per_level=LEVEL_MPP, texture_label=cid, seed=int(seed))


def to_gray(raster: np.ndarray) -> np.ndarray:
    raster = np.asarray(raster, dtype=np.float64)
    if raster.ndim == 2:
        return raster
    return raster[..., 0] * 0.299 + raster[..., 1] * 0.587 + raster[..., 2] * 0.114


def otsu_threshold(gray: np.ndarray, bins: int = 256) -> tuple:
    """Return (threshold, degenerate) maximizing between-class variance.

    Pixels with ``gray < threshold`` form the dark class. ``degenerate`` is
    True when no split separates two non-empty classes with positive variance.
    """
    idx = np.clip(np.floor(gray.ravel() * bins), 0, bins - 1).astype(np.int64)
    hist = np.bincount(idx, minlength=bins).astype(np.float64)
    total = hist.sum()
    p = hist / total
    centers = np.arange(bins, dtype=np.float64)
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        sigma_b = (mu_t * w0 - mu) ** 2 / (w0 * w1)
    sigma_b[~np.isfinite(sigma_b)] = 0.0
    # w1 can be rounding noise rather than exactly zero past the last occupied bin
    sigma_b[(hist[::-1].cumsum()[::-1] - hist) <= 0] = 0.0
    k = int(np.argmax(sigma_b))
    if sigma_b[k] <= 0.0:
        return 0.0, True
    return (k + 1) / bins, False


def compute_tissue_mask(level_raster: np.ndarray, method: str = "otsu") -> TissueMask:
    if method != "otsu":
        raise InvalidArgumentError(f"unsupported mask method {method!r}")
    raster = np.asarray(level_raster)
    if raster.size == 0:
        raise InvalidArgumentError("empty raster")
    gray = to_gray(raster)
    threshold, degenerate = otsu_threshold(gray)
    if degenerate:
        logger.warning("constant raster: no usable tissue")
        return TissueMask(np.zeros(gray.shape, dtype=bool), threshold, degenerate=True)
    return TissueMask(gray < threshold, threshold)


def compute_tissue_masks(pyramid: PyramidImage) -> list:
    return [compute_tissue_mask(level) for level in pyramid.levels]


def _valid_centers(mask: TissueMask, tile_size: int) -> np.ndarray:
    h, w = mask.grid.shape
    half = tile_size // 2
    if h < tile_size or w < tile_size:
        return np.empty(0, dtype=np.int64)
    # centers whose tile stays fully inside the level
    sub = mask.grid[half : h - tile_size + half + 1, half : w - tile_size + half + 1]
    flat = np.flatnonzero(sub)
    ys, xs = np.divmod(flat, sub.shape[1])
    return np.stack([xs + half, ys + half], axis=1)


def sample_tiles(
    pyramid: PyramidImage,
    masks: Sequence[TissueMask],
    resolution_probs: Sequence[float] = (0.25, 0.25, 0.25, 0.25),
    n: int = 1,
    tile_size: int = 256,
    seed: int = 0,
) -> list:
    """Draw ``n`` tiles: level i.i.d. from ``resolution_probs``, center uniform over foreground.

    Returned pixel arrays are read-only views into the pyramid levels.
    """
    probs = np.asarray(resolution_probs, dtype=np.float64)
    if probs.shape != (len(pyramid.levels),) or np.any(probs < 0) or probs.sum() <= 0:
        raise InvalidArgumentError(f"invalid resolution probabilities {resolution_probs}")
    if not np.isclose(probs.sum(), 1.0):
        raise InvalidArgumentError(f"resolution probabilities must sum to 1, got {probs.sum()}")
    if len(masks) != len(pyramid.levels):
        raise InvalidArgumentError("need one tissue mask per pyramid level")

    rng = np.random.default_rng(seed)
    centers = {}
    tiles = []
    for _ in range(n):
        for attempt in range(MAX_RESAMPLE):
            level = int(rng.choice(len(probs), p=probs))
            if level not in centers:
                centers[level] = _valid_centers(masks[level], tile_size)
            cand = centers[level]
            if len(cand):
                break
        else:
            raise SamplingError(f"no usable foreground after {MAX_RESAMPLE} resampling attempts")
        cx, cy = cand[rng.integers(len(cand))]
        x, y = int(cx) - tile_size // 2, int(cy) - tile_size // 2
        view = pyramid.levels[level][y : y + tile_size, x : x + tile_size]
        view.flags.writeable = False
        tiles.append(TileSample(view, pyramid.mpp_per_level[level], (level, x, y), pyramid.texture_label))
    return tiles


def _augment(window: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    out = window
    if rng.random() < 0.5:
        out = out[:, ::-1]
    if rng.random() < 0.5:
        out = out[::-1, :]
    brightness = rng.uniform(-0.1, 0.1)
    contrast = rng.uniform(0.8, 1.2)
    mean = out.mean(axis=(0, 1), keepdims=True)
    out = (out - mean) * contrast + mean + brightness
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def _crop(pixels: np.ndarray, size: int, rng: np.random.Generator, augment: bool) -> np.ndarray:
    h, w = pixels.shape[:2]
    if not augment:
        return np.ascontiguousarray(pixels[:size, :size], dtype=np.float32)
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return np.ascontiguousarray(_augment(pixels[y : y + size, x : x + size], rng))


def make_crops(tile: TileSample, seed: int, augment: bool = True) -> CropSet:
    """Two 224 global crops and four 96 local crops from one tile."""
    h, w = tile.pixels.shape[:2]
    if h < GLOBAL_CROP or w < GLOBAL_CROP:
        raise InvalidArgumentError(f"tile {h}x{w} smaller than the {GLOBAL_CROP} global crop")
    rng = np.random.default_rng(seed)
    globals_ = [_crop(tile.pixels, GLOBAL_CROP, rng, augment) for _ in range(N_GLOBAL)]
    locals_ = [_crop(tile.pixels, LOCAL_CROP, rng, augment) for _ in range(N_LOCAL)]
    return CropSet(globals_, locals_, tile.label)


def derive_seed(*keys: int) -> int:
    """Stable 63-bit seed from a tuple of integers (root seed, worker, index, ...)."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(2, np.uint64)[0] >> np.uint64(1))


# -- on-disk formats ----------------------------------------------------------


def _to_png(raster: np.ndarray, path: str) -> None:
    Image.fromarray(np.round(np.clip(raster, 0, 1) * 255).astype(np.uint8)).save(path)


def _from_png(path: str) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_pyramid(pyramid: PyramidImage, directory: str) -> None:
    """Write ``level_{k}.png`` files plus a ``manifest`` text file.

    PNG storage quantizes pixels to 8 bits.
    """
    os.makedirs(directory, exist_ok=True)
    for k, level in enumerate(pyramid.levels):
        _to_png(level, os.path.join(directory, f"level_{k}.png"))
    lines = [
        f"base_size: {pyramid.base_size}",
        f"seed: {pyramid.seed if pyramid.seed is not None else ''}",
        f"texture_class: {pyramid.texture_label if pyramid.texture_label is not None else ''}",
        f"levels: {len(pyramid.levels)}",
    ]
    lines += [f"mpp_{k}: {mpp}" for k, mpp in enumerate(pyramid.mpp_per_level)]
    with open(os.path.join(directory, "manifest"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_manifest(path: str) -> dict:
    out = {}
    with open(path) as fh:
        for line in fh:
            if ":" in line:
                key, value = line.split(":", 1)
                out[key.strip()] = value.strip()
    return out


def load_pyramid(directory: str) -> PyramidImage:
    meta = read_manifest(os.path.join(directory, "manifest"))
    n = int(meta["levels"])
    levels = [_from_png(os.path.join(directory, f"level_{k}.png")) for k in range(n)]
    mpp = tuple(float(meta[f"mpp_{k}"]) for k in range(n))
    label = int(meta["texture_class"]) if meta.get("texture_class") else None
    seed = int(meta["seed"]) if meta.get("seed") else None
    return PyramidImage(levels, mpp, label, seed)


def write_tile_shard(tiles: Sequence[TileSample], directory: str, prefix: str = "tile") -> str:
    """Flat directory of tile PNGs plus an ``index`` file (path level mpp x y label)."""
    os.makedirs(directory, exist_ok=True)
    index_path = os.path.join(directory, "index")
    with open(index_path, "w") as fh:
        for i, tile in enumerate(tiles):
            name = f"{prefix}_{i:06d}.png"
            _to_png(tile.pixels, os.path.join(directory, name))
            level, x, y = tile.origin
            label = "" if tile.label is None else tile.label
            fh.write(f"{name}\t{level}\t{tile.mpp}\t{x}\t{y}\t{label}\n")
    return index_path


def read_tile_shard(directory: str) -> list:
    tiles = []
    with open(os.path.join(directory, "index")) as fh:
        for line in fh:
            if not line.strip():
                continue
            name, level, mpp, x, y, label = line.rstrip("\n").split("\t")
            pixels = _from_png(os.path.join(directory, name))
            tiles.append(
                TileSample(pixels, float(mpp), (int(level), int(x), int(y)), int(label) if label else None)
            )
    return tiles

