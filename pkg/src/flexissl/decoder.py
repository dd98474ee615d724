"""Shallow MAE decoder with a patch-size-flexible pixel projection."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn as nn

from .backbone import BASE_PATCH, SUPPORTED_GRIDS, Block, TokenSequence, pi_resize, plain_resize
from .errors import InvalidArgumentError
from .masking import image_to_patches, patches_to_image


@dataclass(frozen=True)
class DecoderConfig:
    depth: int = 4
    embed_dim: int = 192
    heads: int = 4
    mlp_ratio: float = 4.0
    grids: tuple = SUPPORTED_GRIDS
    # "resize" bilinearly resizes the stored 16x16 output kernel, "pinv" pseudoinverse-resizes it
    projection_resize: str = "resize"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grids"] = list(self.grids)
        return d


DECODER_DEFAULT = DecoderConfig()
DECODER_DESK = DecoderConfig(depth=1, embed_dim=32, heads=2)
DECODER_MINI = DecoderConfig(depth=1, embed_dim=8, heads=2)
DECODER_PRESETS = {"default": DECODER_DEFAULT, "desk": DECODER_DESK, "mini": DECODER_MINI}


def decoder_config(name_or_dict) -> DecoderConfig:
    if isinstance(name_or_dict, DecoderConfig):
        return name_or_dict
    if isinstance(name_or_dict, str):
        try:
            return DECODER_PRESETS[name_or_dict]
        except KeyError:
            raise InvalidArgumentError(f"unknown decoder preset {name_or_dict!r}") from None
    d = dict(name_or_dict)
    if "grids" in d:
        d["grids"] = tuple(d["grids"])
    return DecoderConfig(**d)


@dataclass
class Reconstruction:
    patches: torch.Tensor  # (B, M, 3*p*p) predictions at masked cells, raster order
    mask: torch.Tensor  # (B, N) bool
    patch_size: int
    crop_size: int
    assembled: Optional[torch.Tensor] = None

    def assemble(self, target: torch.Tensor) -> torch.Tensor:
        """Full (B, 3, H, W) raster: predictions at masked cells, ``target`` pixels elsewhere."""
        full = image_to_patches(target, self.patch_size).clone()
        full[self.mask] = self.patches.reshape(-1, full.shape[-1]).to(full.dtype)
        self.assembled = patches_to_image(full, self.patch_size, target.shape[-2:])
        return self.assembled


class MAEDecoder(nn.Module):
    def __init__(self, encoder_dim: int, config: DecoderConfig = DECODER_DEFAULT, in_chans: int = 3):
        super().__init__()
        self.config = config
        self.in_chans = in_chans
        d = config.embed_dim
        self.embed = nn.Linear(encoder_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        # one learnable position table (CLS + grid) per supported token grid
        self.pos = nn.ParameterDict(
            {str(g): nn.Parameter(torch.zeros(1 + g * g, d)) for g in config.grids}
        )
        self.blocks = nn.ModuleList(Block(d, config.heads, config.mlp_ratio) for _ in range(config.depth))
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.pred_weight = nn.Parameter(torch.empty(d, in_chans, BASE_PATCH, BASE_PATCH))
        self.pred_bias = nn.Parameter(torch.zeros(in_chans, BASE_PATCH, BASE_PATCH))
        self._init_weights()

    def _init_weights(self):
        nn.init.trunc_normal_(self.mask_token, std=0.02)
        for p in self.pos.values():
            nn.init.trunc_normal_(p, std=0.02)
        nn.init.trunc_normal_(self.pred_weight, std=0.02)
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)

    def projection(self, patch_size: int) -> tuple:
        """(weight (D, 3*p*p), bias (3*p*p,)) for the active patch size."""
        resize = pi_resize if self.config.projection_resize == "pinv" else plain_resize
        w = resize(self.pred_weight, patch_size).reshape(self.config.embed_dim, -1)
        b = resize(self.pred_bias, patch_size).reshape(-1)
        return w, b

    def forward(self, visible: TokenSequence, mask: torch.Tensor) -> Reconstruction:
        gh, gw = visible.grid
        b = visible.cls.shape[0]
        n = gh * gw
        if gh != gw or str(gh) not in self.pos:
            raise InvalidArgumentError(f"no decoder position table for grid {visible.grid}")
        if mask.shape != (b, n):
            raise InvalidArgumentError(f"mask shape {tuple(mask.shape)} does not match grid {visible.grid}")
        if visible.visible is not None and not torch.equal(visible.visible, ~mask):
            raise InvalidArgumentError("mask does not match the tokens the encoder dropped")
        n_mask = mask.sum(1)
        if int(n_mask.min()) == 0:
            raise InvalidArgumentError("empty mask: nothing to reconstruct")
        if not torch.all(n_mask == n_mask[0]):
            raise InvalidArgumentError("every row must mask the same number of cells")

        vis = self.embed(visible.patch_tokens)
        if visible.visible is None:
            vis = vis[~mask].reshape(b, -1, vis.shape[-1])
        tokens = self.mask_token.to(vis.dtype).expand(b, n, -1).clone()
        tokens[~mask] = vis.reshape(-1, vis.shape[-1])
        cls = self.embed(visible.cls).unsqueeze(1)
        h = torch.cat([cls, tokens], dim=1) + self.pos[str(gh)].to(vis.dtype)
        for blk in self.blocks:
            h = blk(h)
        h = self.norm(h)[:, 1:]
        w, bias = self.projection(visible.patch_size)
        pred = h[mask].reshape(b, int(n_mask[0]), -1) @ w.to(h.dtype) + bias.to(h.dtype)
        return Reconstruction(pred, mask, visible.patch_size, visible.source_crop_size)


def decode(visible: TokenSequence, mask, decoder: MAEDecoder) -> Reconstruction:
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.ndim == 2 and mask.shape[0] != visible.cls.shape[0]:
        mask = mask.reshape(1, -1).expand(visible.cls.shape[0], -1)
    return decoder(visible, mask)


def target_patches(crops: torch.Tensor, mask: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Ground-truth pixel patches at masked cells, shaped like ``Reconstruction.patches``."""
    patches = image_to_patches(crops, patch_size)
    b = crops.shape[0]
    return patches[mask].reshape(b, -1, patches.shape[-1])
