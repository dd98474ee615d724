"""ViT encoder whose patch and position embeddings adapt to patch sizes 8, 16 and 32.

One set of weights is stored at the base patch size (16) and base grid (14x14).
At run time the patch-embedding kernel is pseudoinverse-resized to the active
patch size and the position grid is bilinearly interpolated to the active
token grid, so the same parameters serve every (crop, patch) geometry.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError

BASE_PATCH = 16
PATCH_SIZES = (8, 16, 32)
CROP_SIZES = (224, 96)
SUPPORTED_GRIDS = tuple(sorted({c // p for c in CROP_SIZES for p in PATCH_SIZES}, reverse=True))


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 12
    heads: int = 6
    embed_dim: int = 384
    mlp_ratio: float = 4.0
    base_patch: int = BASE_PATCH
    base_grid: int = 224 // BASE_PATCH
    in_chans: int = 3

    def to_dict(self) -> dict:
        return asdict(self)


VIT_S = EncoderConfig()
VIT_B = EncoderConfig(depth=12, heads=12, embed_dim=768)
DESK = EncoderConfig(depth=4, heads=4, embed_dim=64)
MINI = EncoderConfig(depth=2, heads=2, embed_dim=16)
PRESETS = {"vit-s": VIT_S, "vit-b": VIT_B, "desk": DESK, "mini": MINI}


def encoder_config(name_or_dict) -> EncoderConfig:
    if isinstance(name_or_dict, EncoderConfig):
        return name_or_dict
    if isinstance(name_or_dict, str):
        try:
            return PRESETS[name_or_dict]
        except KeyError:
            raise InvalidArgumentError(f"unknown encoder preset {name_or_dict!r}") from None
    return EncoderConfig(**name_or_dict)


# -- resize operators ----------------------------------------------------------


def bilinear_matrix_1d(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) bilinear interpolation with half-pixel centers, no antialiasing."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for i in range(n_out):
        src = max((i + 0.5) * scale - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        frac = src - i0
        m[i, i0] += 1.0 - frac
        m[i, i1] += frac
    return m


@lru_cache(maxsize=None)
def resize_matrix(from_p: int, to_p: int) -> np.ndarray:
    """Matrix R of shape (to_p**2, from_p**2) resizing a flattened from_p x from_p patch."""
    r = bilinear_matrix_1d(from_p, to_p)
    return np.kron(r, r)


@lru_cache(maxsize=None)
def _pinv_resize_matrix(from_p: int, to_p: int) -> np.ndarray:
    # w_hat = pinv(R^T) w solves R^T w_hat = w exactly when R has full column
    # rank (upsizing) and in the least-squares sense otherwise (downsizing).
    return np.linalg.pinv(resize_matrix(from_p, to_p).T)


def _check_patch(p: int) -> None:
    if p not in PATCH_SIZES:
        raise InvalidArgumentError(f"patch size must be one of {PATCH_SIZES}, got {p}")


def _apply_spatial(kernel: torch.Tensor, mat: np.ndarray, to_p: int) -> torch.Tensor:
    lead = kernel.shape[:-2]
    flat = kernel.reshape(-1, kernel.shape[-2] * kernel.shape[-1])
    m = torch.as_tensor(mat, dtype=kernel.dtype, device=kernel.device)
    return (flat @ m.T).reshape(*lead, to_p, to_p)


def pi_resize(kernel: torch.Tensor, to_p: int) -> torch.Tensor:
    """Pseudoinverse-resize a (..., p0, p0) kernel so that <w_hat, R x> = <w, x>.

    Returns ``kernel`` itself when the size is unchanged.
    """
    _check_patch(to_p)
    from_p = kernel.shape[-1]
    if kernel.shape[-2] != from_p:
        raise InvalidArgumentError("kernel must be square in its last two dimensions")
    if from_p == to_p:
        return kernel
    return _apply_spatial(kernel, _pinv_resize_matrix(from_p, to_p), to_p)


def plain_resize(kernel: torch.Tensor, to_p: int) -> torch.Tensor:
    """Bilinearly resize a (..., p0, p0) kernel (used for output projections)."""
    _check_patch(to_p)
    from_p = kernel.shape[-1]
    if from_p == to_p:
        return kernel
    return _apply_spatial(kernel, resize_matrix(from_p, to_p), to_p)


def interpolate_pos_embed(base_grid: torch.Tensor, target_grid) -> torch.Tensor:
    """Bilinear interpolation of a (gh, gw, D) position grid to ``target_grid``."""
    th, tw = (target_grid, target_grid) if isinstance(target_grid, int) else tuple(target_grid)
    if th <= 0 or tw <= 0 or base_grid.ndim != 3:
        raise InvalidArgumentError(f"bad interpolation geometry {tuple(base_grid.shape)} -> {(th, tw)}")
    if tuple(base_grid.shape[:2]) == (th, tw):
        return base_grid
    x = base_grid.permute(2, 0, 1).unsqueeze(0)
    y = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=False)
    return y[0].permute(1, 2, 0)


# -- token containers ------------------------------------------------------------


@dataclass
class TokenSequence:
    """Encoder output. ``patch_tokens`` is (B, N, D); N = gh*gw unless tokens were dropped."""

    cls: torch.Tensor
    patch_tokens: torch.Tensor
    grid: tuple
    patch_size: int
    source_crop_size: int
    visible: Optional[torch.Tensor] = None  # (B, gh*gw) bool when masked tokens were dropped

    def grid_tokens(self) -> torch.Tensor:
        if self.visible is not None:
            raise InvalidArgumentError("token grid unavailable after dropping masked tokens")
        b, _, d = self.patch_tokens.shape
        return self.patch_tokens.reshape(b, self.grid[0], self.grid[1], d)


# -- modules ---------------------------------------------------------------------


class Attention(nn.Module):
    def __init__(self, dim, heads):
        super().__init__()
        if dim % heads:
            raise InvalidArgumentError(f"embed_dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        out = F.scaled_dot_product_attention(qkv[0], qkv[1], qkv[2])
        return self.proj(out.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim, heads, mlp_ratio=4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim, eps=1e-6)
        self.attn = Attention(dim, heads)
        self.norm2 = nn.LayerNorm(dim, eps=1e-6)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class FlexiPatchEmbed(nn.Module):
    def __init__(self, embed_dim, in_chans=3, base_patch=BASE_PATCH):
        super().__init__()
        self.base_patch = base_patch
        self.weight = nn.Parameter(torch.empty(embed_dim, in_chans, base_patch, base_patch))
        self.bias = nn.Parameter(torch.zeros(embed_dim))
        nn.init.trunc_normal_(self.weight, std=0.02)

    def kernel(self, patch_size: int) -> torch.Tensor:
        return pi_resize(self.weight, patch_size)

    def forward(self, x, patch_size):
        h, w = x.shape[-2:]
        if h % patch_size or w % patch_size:
            raise InvalidArgumentError(f"crop {h}x{w} not divisible by patch size {patch_size}")
        out = F.conv2d(x, self.kernel(patch_size), self.bias, stride=patch_size)
        return out.flatten(2).transpose(1, 2)


class FlexiViT(nn.Module):
    """ViT encoder with flexible patch size; returns CLS and patch tokens."""

    def __init__(self, config: EncoderConfig = VIT_S):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.patch_embed = FlexiPatchEmbed(d, config.in_chans, config.base_patch)
        self.cls_token = nn.Parameter(torch.zeros(d))
        self.cls_pos = nn.Parameter(torch.zeros(d))
        self.pos_embed = nn.Parameter(torch.zeros(config.base_grid, config.base_grid, d))
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self._init_weights()

    def _init_weights(self):
        for t in (self.cls_token, self.cls_pos, self.pos_embed):
            nn.init.trunc_normal_(t, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    @property
    def embed_dim(self) -> int:
        return self.config.embed_dim

    def patchify(self, x: torch.Tensor, patch_size: int, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Embed a (B, C, H, W) batch into (B, N, D) tokens with position embeddings added.

        Tokens flagged in ``mask`` (B, N) are replaced by the learned mask token
        before position embeddings are added.
        """
        _check_patch(patch_size)
        tokens = self.patch_embed(x, patch_size)
        if mask is not None:
            if mask.shape != tokens.shape[:2]:
                raise InvalidArgumentError(f"mask shape {tuple(mask.shape)} != {tuple(tokens.shape[:2])}")
            tokens = torch.where(mask.unsqueeze(-1), self.mask_token.to(tokens.dtype), tokens)
        grid = (x.shape[-2] // patch_size, x.shape[-1] // patch_size)
        pos = interpolate_pos_embed(self.pos_embed, grid)
        return tokens + pos.reshape(1, -1, self.embed_dim)

    def forward(
        self,
        x: torch.Tensor,
        patch_size: int = BASE_PATCH,
        mask: Optional[torch.Tensor] = None,
        drop_mask: Optional[torch.Tensor] = None,
    ) -> TokenSequence:
        """Encode a crop batch.

        ``mask`` (B, N) bool replaces masked tokens with the learned mask token.
        ``drop_mask`` (B, N) bool removes masked tokens before the transformer;
        every row must mask the same number of tokens.
        """
        b = x.shape[0]
        tokens = self.patchify(x, patch_size, mask)
        n = tokens.shape[1]
        grid = (x.shape[-2] // patch_size, x.shape[-1] // patch_size)
        visible = None
        if drop_mask is not None:
            if drop_mask.shape != (b, n):
                raise InvalidArgumentError(f"drop mask shape {tuple(drop_mask.shape)} != {(b, n)}")
            visible = ~drop_mask
            n_vis = visible.sum(1)
            if not torch.all(n_vis == n_vis[0]):
                raise InvalidArgumentError("drop mask must keep the same token count in every row")
            tokens = tokens[visible].reshape(b, int(n_vis[0]), -1)
        cls = (self.cls_token + self.cls_pos).to(tokens.dtype).expand(b, 1, -1)
        h = torch.cat([cls, tokens], dim=1)
        for blk in self.blocks:
            h = blk(h)
        h = self.norm(h)
        return TokenSequence(h[:, 0], h[:, 1:], grid, patch_size, x.shape[-1], visible)


def patchify(model: FlexiViT, crop: torch.Tensor, patch_size: int) -> torch.Tensor:
    """CLS plus patch tokens (with position embeddings) for a crop batch, before the transformer."""
    tokens = model.patchify(crop, patch_size)
    cls = (model.cls_token + model.cls_pos).expand(tokens.shape[0], 1, -1)
    return torch.cat([cls, tokens], dim=1)


def encode(model: FlexiViT, crop: torch.Tensor, patch_size: int, visible_mask=None) -> TokenSequence:
    """Encode ``crop``; with ``visible_mask`` (True = masked) the masked tokens are dropped.

    The mask may be a MaskSpec or a (gh, gw) grid shared by the batch, or a (B, N)
    per-row mask.
    """
    drop = None
    if visible_mask is not None:
        grid = getattr(visible_mask, "grid", visible_mask)
        drop = torch.as_tensor(np.asarray(grid), dtype=torch.bool)
        b = crop.shape[0]
        n = (crop.shape[-2] // patch_size) * (crop.shape[-1] // patch_size)
        if tuple(drop.shape) != (b, n):
            drop = drop.reshape(1, -1).expand(b, -1)
    return model(crop, patch_size, drop_mask=drop)
