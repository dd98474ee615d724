"""Patch-grid masks for the iBOT (block-wise) and MAE (uniform) objectives."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Optional

import numpy as np
import torch

from .errors import InvalidArgumentError

DEFAULT_IBOT_RATIO = 0.3
DEFAULT_MAE_RATIO = 0.75
MIN_BLOCK = 4
MAX_BLOCK_ATTEMPTS = 100


@dataclass
class MaskSpec:
    grid: np.ndarray  # (gh, gw) bool, True = masked
    patch_size: int
    target_ratio: float

    @property
    def count(self) -> int:
        return int(self.grid.sum())

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1)


def masked_count(ratio: float, n_cells: int) -> int:
    """round(ratio * n_cells) with round-half-up on the decimal value of ``ratio``."""
    exact = Decimal(repr(float(ratio))) * n_cells
    return int(exact.to_integral_value(rounding=ROUND_HALF_UP))


def _check(grid_dims, ratio) -> tuple:
    gh, gw = (grid_dims, grid_dims) if isinstance(grid_dims, int) else tuple(grid_dims)
    if gh <= 0 or gw <= 0:
        raise InvalidArgumentError(f"bad grid dims {grid_dims}")
    if not 0.0 <= ratio < 1.0:
        raise InvalidArgumentError(f"mask ratio must lie in [0, 1), got {ratio}")
    return gh, gw


def _grow_block(grid, top, left, h, w, budget):
    """Mask up to ``budget`` new cells of a rectangle, breadth-first from its top-left cell.

    The visited cells form one connected region, so a round adds at most one
    new connected component.
    """
    added = 0
    seen = {(top, left)}
    queue = deque([(top, left)])
    while queue and added < budget:
        r, c = queue.popleft()
        if not grid[r, c]:
            grid[r, c] = True
            added += 1
        for dr, dc in ((0, 1), (1, 0), (0, -1), (-1, 0)):
            rr, cc = r + dr, c + dc
            if top <= rr < top + h and left <= cc < left + w and (rr, cc) not in seen:
                seen.add((rr, cc))
                queue.append((rr, cc))
    return added


def sample_ibot_mask(grid_dims, ratio: float = DEFAULT_IBOT_RATIO, seed=0, patch_size: int = 16,
                     trace: Optional[list] = None) -> MaskSpec:
    """Block-wise random mask with exactly ``masked_count(ratio, gh*gw)`` cells.

    When ``trace`` is a list, a copy of the grid is appended after every round.
    """
    gh, gw = _check(grid_dims, ratio)
    target = masked_count(ratio, gh * gw)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    grid = np.zeros((gh, gw), dtype=bool)
    log_aspect = (math.log(0.3), math.log(1 / 0.3))
    failures = 0
    while grid.sum() < target:
        remaining = target - int(grid.sum())
        if failures >= MAX_BLOCK_ATTEMPTS:
            free = np.flatnonzero(~grid)
            r, c = divmod(int(free[rng.integers(len(free))]), gw)
            grid[r, c] = True
            if trace is not None:
                trace.append(grid.copy())
            continue
        area = rng.uniform(min(MIN_BLOCK, remaining), max(remaining, MIN_BLOCK))
        aspect = math.exp(rng.uniform(*log_aspect))
        h = min(max(int(round(math.sqrt(area * aspect))), 1), gh)
        w = min(max(int(round(math.sqrt(area / aspect))), 1), gw)
        top = int(rng.integers(0, gh - h + 1))
        left = int(rng.integers(0, gw - w + 1))
        if grid[top : top + h, left : left + w].all():
            failures += 1
            continue
        _grow_block(grid, top, left, h, w, remaining)
        if trace is not None:
            trace.append(grid.copy())
    return MaskSpec(grid, patch_size, ratio)


def sample_mae_mask(grid_dims, ratio_high: float = DEFAULT_MAE_RATIO, seed=0, patch_size: int = 16) -> MaskSpec:
    """Uniform random mask without replacement at the exact count."""
    gh, gw = _check(grid_dims, ratio_high)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    n = gh * gw
    flat = np.zeros(n, dtype=bool)
    flat[rng.permutation(n)[: masked_count(ratio_high, n)]] = True
    return MaskSpec(flat.reshape(gh, gw), patch_size, ratio_high)


def stack_masks(masks) -> torch.Tensor:
    """(B, gh*gw) bool tensor from a sequence of MaskSpec."""
    return torch.from_numpy(np.stack([m.flat() for m in masks]))


# -- pixel <-> patch layout ----------------------------------------------------------


def image_to_patches(images: torch.Tensor, patch_size: int) -> torch.Tensor:
    """(B, C, H, W) -> (B, N, C*p*p), patches in raster order, pixels in (C, p, p) order."""
    h, w = images.shape[-2:]
    if h % patch_size or w % patch_size:
        raise InvalidArgumentError(f"image {h}x{w} not divisible by patch size {patch_size}")
    return torch.nn.functional.unfold(images, patch_size, stride=patch_size).transpose(1, 2)


def patches_to_image(patches: torch.Tensor, patch_size: int, size) -> torch.Tensor:
    h, w = (size, size) if isinstance(size, int) else size
    return torch.nn.functional.fold(patches.transpose(1, 2), (h, w), patch_size, stride=patch_size)


def mask_to_pixels(mask: torch.Tensor, patch_size: int, size) -> torch.Tensor:
    """Expand a (B, N) patch mask to a (B, 1, H, W) pixel mask."""
    h, w = (size, size) if isinstance(size, int) else size
    gh, gw = h // patch_size, w // patch_size
    m = mask.reshape(-1, 1, gh, gw)
    return m.repeat_interleave(patch_size, 2).repeat_interleave(patch_size, 3)
