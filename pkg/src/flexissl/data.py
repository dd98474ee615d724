"""Tile sources and deterministic crop batches for pre-training."""

from __future__ import annotations

import os
import queue
import threading
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from . import pyramid as pyr
from .errors import InvalidArgumentError


@dataclass
class CropBatch:
    globals: torch.Tensor  # (B, 2, 3, 224, 224)
    locals: torch.Tensor  # (B, 4, 3, 96, 96)
    labels: Optional[torch.Tensor] = None

    def __len__(self):
        return self.globals.shape[0]

    def split(self, n: int) -> list:
        size = len(self) // n
        out = []
        for i in range(n):
            sl = slice(i * size, (i + 1) * size)
            out.append(CropBatch(self.globals[sl], self.locals[sl], None if self.labels is None else self.labels[sl]))
        return out


def _chw(raster: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(raster.transpose(2, 0, 1)))


def collate(cropsets) -> CropBatch:
    g = torch.stack([torch.stack([_chw(c) for c in cs.global_crops]) for cs in cropsets])
    l = torch.stack([torch.stack([_chw(c) for c in cs.local_crops]) for cs in cropsets])
    labels = [cs.label for cs in cropsets]
    lab = None if any(x is None for x in labels) else torch.tensor(labels)
    return CropBatch(g, l, lab)


class SyntheticTileSource:
    """Tiles drawn from procedurally generated pyramids, one pyramid per index.

    Tiles are sampled once per (pyramid, slot) and cached as uint8 so that
    later epochs only re-crop.
    """

    def __init__(self, n_pyramids, base_size=768, texture_classes=("stripes", "dots"),
                 resolution_probs=(0.25, 0.25, 0.25, 0.25), tile_size=256, tiles_per_pyramid=1,
                 seed=0, cache=True):
        if n_pyramids < 1 or tiles_per_pyramid < 1:
            raise InvalidArgumentError("need at least one pyramid and one tile per pyramid")
        self.n_pyramids = n_pyramids
        self.base_size = base_size
        self.classes = [pyr.texture_id(c) for c in texture_classes]
        self.resolution_probs = tuple(resolution_probs)
        self.tile_size = tile_size
        self.tiles_per_pyramid = tiles_per_pyramid
        self.seed = seed
        self._cache = {} if cache else None
        self._lock = threading.Lock()

    def __len__(self):
        return self.n_pyramids * self.tiles_per_pyramid

    def label(self, pyramid_index: int) -> int:
        return self.classes[pyramid_index % len(self.classes)]

    def pyramid(self, pyramid_index: int) -> pyr.PyramidImage:
        return pyr.build_synthetic_pyramid(
            pyr.derive_seed(self.seed, pyramid_index), self.base_size, self.label(pyramid_index)
        )

    def _sample(self, pyramid_index: int) -> list:
        p = self.pyramid(pyramid_index)
        masks = pyr.compute_tissue_masks(p)
        return pyr.sample_tiles(p, masks, self.resolution_probs, self.tiles_per_pyramid, self.tile_size,
                                pyr.derive_seed(self.seed, pyramid_index, 1))

    def tile(self, index: int) -> pyr.TileSample:
        pi, slot = divmod(index, self.tiles_per_pyramid)
        if self._cache is not None:
            with self._lock:
                hit = self._cache.get(pi)
            if hit is None:
                tiles = self._sample(pi)
                hit = [(np.round(t.pixels * 255).astype(np.uint8), t.mpp, t.origin, t.label) for t in tiles]
                with self._lock:
                    self._cache[pi] = hit
            px, mpp, origin, label = hit[slot]
            return pyr.TileSample(px.astype(np.float32) / 255.0, mpp, origin, label)
        return self._sample(pi)[slot]


class ShardTileSource:
    """Tiles from a shard directory written by ``pyramid.write_tile_shard``."""

    def __init__(self, directory):
        self.directory = directory
        self.entries = []
        with open(os.path.join(directory, "index")) as fh:
            for line in fh:
                if line.strip():
                    self.entries.append(line.rstrip("\n").split("\t"))

    def __len__(self):
        return len(self.entries)

    def tile(self, index: int) -> pyr.TileSample:
        name, level, mpp, x, y, label = self.entries[index]
        px = pyr._from_png(os.path.join(self.directory, name))
        return pyr.TileSample(px, float(mpp), (int(level), int(x), int(y)), int(label) if label else None)


class PyramidDirSource(SyntheticTileSource):
    """Tiles sampled from pyramids saved by ``synth-data`` (one sub-directory each)."""

    def __init__(self, directory, resolution_probs=(0.25, 0.25, 0.25, 0.25), tile_size=256,
                 tiles_per_pyramid=1, seed=0, cache=True):
        self.dirs = sorted(
            os.path.join(directory, d) for d in os.listdir(directory)
            if os.path.exists(os.path.join(directory, d, "manifest"))
        )
        if not self.dirs:
            raise InvalidArgumentError(f"no pyramids under {directory}")
        super().__init__(len(self.dirs), 256, ("stripes",), resolution_probs, tile_size, tiles_per_pyramid,
                         seed, cache)

    def pyramid(self, pyramid_index):
        return pyr.load_pyramid(self.dirs[pyramid_index])


def source_from_config(data_cfg, seed: int):
    if data_cfg.source == "synthetic":
        return SyntheticTileSource(data_cfg.n_pyramids, data_cfg.base_size, data_cfg.texture_classes,
                                   data_cfg.resolution_probs, data_cfg.tile_size, data_cfg.tiles_per_pyramid, seed)
    if data_cfg.source == "pyramids":
        return PyramidDirSource(data_cfg.pyramid_dir, data_cfg.resolution_probs, data_cfg.tile_size,
                                data_cfg.tiles_per_pyramid, seed)
    if data_cfg.source == "shard":
        return ShardTileSource(data_cfg.pyramid_dir)
    raise InvalidArgumentError(f"unknown data source {data_cfg.source!r}")


class BatchPlan:
    """Maps a global step to the tile indices and crop seeds of its batch."""

    def __init__(self, n_items: int, batch_size: int, seed: int):
        if n_items < batch_size:
            raise InvalidArgumentError(f"dataset of {n_items} tiles smaller than batch size {batch_size}")
        self.n_items = n_items
        self.batch_size = batch_size
        self.seed = seed
        self.steps_per_epoch = n_items // batch_size
        self._lock = threading.Lock()
        self._perms = {}

    def _perm(self, epoch: int) -> np.ndarray:
        with self._lock:
            if epoch not in self._perms:
                self._perms = {epoch: np.random.default_rng(pyr.derive_seed(self.seed, 7, epoch)).permutation(self.n_items)}
            return self._perms[epoch]

    def indices(self, step: int) -> tuple:
        epoch, k = divmod(step, self.steps_per_epoch)
        idx = self._perm(epoch)[k * self.batch_size : (k + 1) * self.batch_size]
        return epoch, [int(i) for i in idx]


def build_batch(source, plan: BatchPlan, step: int, augment=True) -> CropBatch:
    epoch, idx = plan.indices(step)
    cropsets = [
        pyr.make_crops(source.tile(i), pyr.derive_seed(plan.seed, epoch, i), augment=augment) for i in idx
    ]
    return collate(cropsets)


def iterate_batches(source, plan: BatchPlan, start: int, stop: int, augment=True, workers=0, prefetch=4):
    """Yield (step, CropBatch) in step order; ``workers`` > 0 prefetches on threads."""
    if workers <= 0:
        for step in range(start, stop):
            yield step, build_batch(source, plan, step, augment)
        return

    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending = queue.Queue(maxsize=max(prefetch, 1))
        nxt = start

        def submit():
            nonlocal nxt
            while nxt < stop and not pending.full():
                # each batch owns its own seeds, so thread scheduling cannot change content
                pending.put((nxt, pool.submit(build_batch, source, plan, nxt, augment)))
                nxt += 1

        submit()
        while not pending.empty():
            step, fut = pending.get()
            yield step, fut.result()
            submit()
