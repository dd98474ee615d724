"""Frozen-backbone task heads: probes, attentive probe, center-cell head and AdditiveMIL."""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

TISSUE_PATCH = 16
CELL_PATCH = 8


# -- probes ----------------------------------------------------------------------------


def linear_probe(cls: torch.Tensor, weight: torch.Tensor, bias: Optional[torch.Tensor] = None) -> torch.Tensor:
    if cls.shape[-1] != weight.shape[-1]:
        raise InvalidArgumentError(f"feature dim {cls.shape[-1]} vs head dim {weight.shape[-1]}")
    out = cls @ weight.T
    return out if bias is None else out + bias


class LinearHead(nn.Module):
    kind = "linear"

    def __init__(self, dim, n_classes):
        super().__init__()
        self.fc = nn.Linear(dim, n_classes)

    def forward(self, cls, patch_tokens=None):
        return linear_probe(cls, self.fc.weight, self.fc.bias)


def _mlp(in_dim, hidden, out_dim):
    return nn.Sequential(nn.Linear(in_dim, hidden), nn.GELU(), nn.Linear(hidden, out_dim))


class MLPHead(nn.Module):
    kind = "mlp"

    def __init__(self, dim, n_classes, hidden=256):
        super().__init__()
        self.mlp = _mlp(dim, hidden, n_classes)

    def forward(self, cls, patch_tokens=None):
        return self.mlp(cls)


class AttentivePoolHead(nn.Module):
    """CLS concatenated with an attention-pooled summary of the patch tokens, then an MLP.

    Scores are q.k_i / sqrt(D) with k_i = W_k t_i; the pooled vector is the
    attention-weighted mean of the raw tokens. ``query="learned"`` uses one
    learned query vector, ``query="cls"`` projects the CLS embedding instead.
    """

    kind = "attentive"

    def __init__(self, dim, n_classes, hidden=256, query="learned"):
        super().__init__()
        if query not in ("learned", "cls"):
            raise InvalidArgumentError(f"unknown query mode {query!r}")
        self.query_mode = query
        self.query = nn.Parameter(torch.zeros(dim))
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.mlp = _mlp(2 * dim, hidden, n_classes)
        nn.init.trunc_normal_(self.query, std=0.02)

    def attention(self, cls, patch_tokens):
        if patch_tokens.shape[-2] == 0:
            raise InvalidArgumentError("attentive probe needs at least one patch token")
        q = self.query.expand(cls.shape[0], -1) if self.query_mode == "learned" else self.q_proj(cls)
        k = self.k_proj(patch_tokens)
        scores = torch.einsum("bd,bnd->bn", q, k) / math.sqrt(k.shape[-1])
        return F.softmax(scores, dim=-1)

    def pool(self, cls, patch_tokens):
        a = self.attention(cls, patch_tokens)
        return torch.einsum("bn,bnd->bd", a, patch_tokens)

    def forward(self, cls, patch_tokens):
        return self.mlp(torch.cat([cls, self.pool(cls, patch_tokens)], dim=-1))


def attentive_probe(cls, patch_tokens, head: AttentivePoolHead):
    return head(cls, patch_tokens)


def central_indices(gh: int, gw: int) -> list:
    """Flat indices of the central 2x2 cells of an even-sided grid, row-major."""
    if gh % 2 or gw % 2 or gh < 2 or gw < 2:
        raise InvalidArgumentError(f"grid {gh}x{gw} has no unique central 2x2 block")
    r, c = gh // 2 - 1, gw // 2 - 1
    return [r * gw + c, r * gw + c + 1, (r + 1) * gw + c, (r + 1) * gw + c + 1]


class CenterCellHead(nn.Module):
    """CLS concatenated with the mean of the four central patch tokens, then an MLP."""

    kind = "center-cell"

    def __init__(self, dim, n_classes, hidden=256):
        super().__init__()
        self.mlp = _mlp(2 * dim, hidden, n_classes)

    @staticmethod
    def features(cls, patch_tokens, grid=None):
        n = patch_tokens.shape[-2]
        gh, gw = grid if grid is not None else (int(round(math.sqrt(n))),) * 2
        if gh * gw != n:
            raise InvalidArgumentError(f"{n} tokens do not form a {gh}x{gw} grid")
        pooled = patch_tokens[:, central_indices(gh, gw)].mean(1)
        return torch.cat([cls, pooled], dim=-1)

    def forward(self, cls, patch_tokens, grid=None):
        return self.mlp(self.features(cls, patch_tokens, grid))


def center_cell_head(cls, patch_tokens, head: CenterCellHead, grid=None):
    return head(cls, patch_tokens, grid)


# -- AdditiveMIL ----------------------------------------------------------------------------


@dataclass
class MILBag:
    tile_features: torch.Tensor  # (N, D)
    bag_label: int
    tile_coords: Optional[np.ndarray] = None

    def __post_init__(self):
        self.tile_features = torch.as_tensor(self.tile_features)
        if self.tile_features.ndim != 2 or self.tile_features.shape[0] == 0:
            raise InvalidArgumentError("a bag needs a non-empty (N, D) feature matrix")


@dataclass
class AdditiveOutput:
    bag_logits: torch.Tensor  # (C,)
    per_tile_contributions: torch.Tensor  # (N, C), rows in input tile order
    attention: torch.Tensor  # (N,)
    order: torch.Tensor = None  # canonical summation order: bag_logits == contributions[order].sum(0)


def canonical_order(features: torch.Tensor) -> torch.Tensor:
    """Permutation-independent ordering of bag rows (lexicographic on feature values)."""
    x = features.detach().cpu().numpy()
    return torch.from_numpy(np.lexsort(x.T[::-1]).copy())


class AdditiveMIL(nn.Module):
    """Gated attention followed by a per-tile classifier whose outputs sum to the bag logits.

    Tiles are processed in a canonical order so that bag logits are bit-identical
    under any permutation of the input tiles.
    """

    kind = "mil"

    def __init__(self, dim, n_classes, attn_hidden=128, cls_hidden=128):
        super().__init__()
        self.attention_a = nn.Sequential(nn.Linear(dim, attn_hidden), nn.Tanh())
        self.attention_b = nn.Sequential(nn.Linear(dim, attn_hidden), nn.Sigmoid())
        self.attention_c = nn.Linear(attn_hidden, 1)
        self.classifier = _mlp(dim, cls_hidden, n_classes)

    def forward(self, features: torch.Tensor) -> AdditiveOutput:
        if features.ndim != 2 or features.shape[0] == 0:
            raise InvalidArgumentError("AdditiveMIL needs a non-empty (N, D) bag")
        order = canonical_order(features)
        h = features[order]
        scores = self.attention_c(self.attention_a(h) * self.attention_b(h)).squeeze(-1)
        attn = F.softmax(scores, dim=0)
        contrib = self.classifier(attn.unsqueeze(-1) * h)
        bag = contrib.sum(0)
        inverse = torch.empty_like(order)
        inverse[order] = torch.arange(len(order))
        return AdditiveOutput(bag, contrib[inverse], attn[inverse], order)


def additive_mil(bag: MILBag, head: AdditiveMIL) -> AdditiveOutput:
    return head(bag.tile_features)


def export_contributions(bag: MILBag, output: AdditiveOutput, path: str) -> None:
    """CSV with one row per tile: index, x, y, attention, one column per class contribution."""
    import csv

    contrib = output.per_tile_contributions.detach().cpu().numpy()
    attention = output.attention.detach().cpu().numpy()
    n_classes = contrib.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tile", "x", "y", "attention"] + [f"class_{c}" for c in range(n_classes)])
        for i in range(contrib.shape[0]):
            x, y = ("", "") if bag.tile_coords is None else (int(bag.tile_coords[i][0]), int(bag.tile_coords[i][1]))
            w.writerow([i, x, y, f"{float(attention[i]):.8g}"] + [f"{v:.8g}" for v in contrib[i]])


# -- fitting ----------------------------------------------------------------------------------


@dataclass
class FitConfig:
    n_classes: int = 2
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    hidden: int = 256
    seed: int = 0
    query: str = "learned"


HEAD_KINDS = ("linear", "mlp", "attentive", "center-cell", "mil")


def make_head(kind: str, dim: int, cfg: FitConfig) -> nn.Module:
    torch.manual_seed(cfg.seed)
    if kind == "linear":
        return LinearHead(dim, cfg.n_classes)
    if kind == "mlp":
        return MLPHead(dim, cfg.n_classes, cfg.hidden)
    if kind == "attentive":
        return AttentivePoolHead(dim, cfg.n_classes, cfg.hidden, cfg.query)
    if kind == "center-cell":
        return CenterCellHead(dim, cfg.n_classes, cfg.hidden)
    if kind == "mil":
        return AdditiveMIL(dim, cfg.n_classes, cfg.hidden, cfg.hidden)
    raise InvalidArgumentError(f"unknown head kind {kind!r}")


def _check_labels(labels, n_classes):
    labels = torch.as_tensor(labels, dtype=torch.long)
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= n_classes):
        raise InvalidArgumentError(f"labels must lie in [0, {n_classes})")
    return labels


def fit_head(kind: str, features, labels, cfg: FitConfig = FitConfig()) -> nn.Module:
    """Fit a head on cached frozen features by minibatch AdamW on cross-entropy.

    ``features`` is a (N, D) CLS tensor for linear/mlp heads, a (cls, patch_tokens)
    pair for attentive/center-cell heads, or a list of MILBag for ``mil``.
    """
    labels = _check_labels(labels, cfg.n_classes)
    if kind == "mil":
        dim = features[0].tile_features.shape[-1]
    elif kind in ("attentive", "center-cell"):
        dim = features[0].shape[-1]
    else:
        dim = features.shape[-1]
    head = make_head(kind, dim, cfg)
    if cfg.epochs <= 0:
        return head.eval()
    opt = torch.optim.AdamW(head.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(labels)
    head.train()
    for _ in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        if kind == "mil":
            for i in perm.tolist():
                out = head(features[i].tile_features)
                loss = F.cross_entropy(out.bag_logits.unsqueeze(0), labels[i : i + 1])
                opt.zero_grad()
                loss.backward()
                opt.step()
            continue
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            logits = head_logits(head, features, idx)
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return head.eval()


def finetune_mil(backbone, bags, labels, cfg: FitConfig = FitConfig(), patch_size: int = TISSUE_PATCH,
                 backbone_lr: Optional[float] = None) -> tuple:
    """Jointly train a copy of ``backbone`` and an AdditiveMIL head on bags of tile pixels.

    ``bags`` is a list of (N_i, H, W, 3) float arrays. Returns (backbone, head), both in
    eval mode; the input backbone is left untouched.
    """
    import copy

    labels = _check_labels(labels, cfg.n_classes)
    if len(bags) != len(labels) or not bags:
        raise InvalidArgumentError("need one label per bag and at least one bag")
    model = copy.deepcopy(backbone)
    for p in model.parameters():
        p.requires_grad_(True)
    model.loaded_from = "finetuned"
    head = make_head("mil", model.embed_dim, cfg)
    opt = torch.optim.AdamW(
        [{"params": model.parameters(), "lr": backbone_lr if backbone_lr is not None else cfg.lr * 0.1},
         {"params": head.parameters(), "lr": cfg.lr}],
        weight_decay=cfg.weight_decay,
    )
    gen = torch.Generator().manual_seed(cfg.seed)
    tensors = [_crops_tensor(b) for b in bags]
    model.train()
    head.train()
    for _ in range(cfg.epochs):
        for i in torch.randperm(len(tensors), generator=gen).tolist():
            feats = model(tensors[i], patch_size).cls
            loss = F.cross_entropy(head(feats).bag_logits.unsqueeze(0), labels[i : i + 1])
            opt.zero_grad()
            loss.backward()
            opt.step()
    return model.eval(), head.eval()


def head_logits(head: nn.Module, features, idx=None) -> torch.Tensor:
    if isinstance(head, AdditiveMIL):
        bags = features if idx is None else [features[i] for i in idx]
        return torch.stack([head(b.tile_features).bag_logits for b in bags])
    if isinstance(head, (AttentivePoolHead, CenterCellHead)):
        cls, tokens = features
        if idx is not None:
            cls, tokens = cls[idx], tokens[idx]
        return head(cls, tokens)
    x = features if idx is None else features[idx]
    return head(x)


@torch.no_grad()
def predict(head: nn.Module, features) -> tuple:
    """(predicted labels, class probabilities) as numpy arrays."""
    head.eval()
    logits = head_logits(head, features)
    probs = F.softmax(logits, dim=-1)
    return probs.argmax(-1).numpy(), probs.numpy()


# -- feature extraction and caching -------------------------------------------------------------


def _crops_tensor(crops) -> torch.Tensor:
    if isinstance(crops, torch.Tensor):
        return crops
    arr = np.stack([np.asarray(c, dtype=np.float32) for c in crops])
    return torch.from_numpy(arr.transpose(0, 3, 1, 2).copy())


@torch.no_grad()
def extract_features(backbone, crops, patch_size: int = TISSUE_PATCH, batch_size: int = 32) -> dict:
    """CLS and patch-token features of the frozen backbone, as float32 numpy arrays."""
    if getattr(backbone, "loaded_from", "teacher") != "teacher":
        raise InvalidArgumentError("downstream features must come from teacher weights")
    backbone.eval()
    x = _crops_tensor(crops)
    cls_out, tok_out = [], []
    for start in range(0, x.shape[0], batch_size):
        out = backbone(x[start : start + batch_size], patch_size)
        cls_out.append(out.cls.numpy())
        tok_out.append(out.patch_tokens.numpy())
    return {
        "cls": np.concatenate(cls_out).astype(np.float32),
        "patch": np.concatenate(tok_out).astype(np.float32),
        "grid": np.array(out.grid),
    }


def cache_key(checkpoint_hash: str, patch_size: int, dataset_id: str) -> str:
    return hashlib.sha256(f"{checkpoint_hash}|{patch_size}|{dataset_id}".encode()).hexdigest()[:20]


def cached_features(cache_dir: str, checkpoint_hash: str, patch_size: int, dataset_id: str, compute) -> dict:
    """Load features for (checkpoint, patch size, dataset) from ``cache_dir`` or compute and store them.

    Each entry is ``<key>.npz`` (arrays) plus ``<key>.json`` (manifest).
    """
    key = cache_key(checkpoint_hash, patch_size, dataset_id)
    arrays_path = os.path.join(cache_dir, f"{key}.npz")
    if os.path.exists(arrays_path):
        with np.load(arrays_path) as npz:
            return {k: npz[k] for k in npz.files}
    feats = compute()
    os.makedirs(cache_dir, exist_ok=True)
    np.savez(arrays_path, **feats)
    manifest = {"checkpoint": checkpoint_hash, "patch_size": patch_size, "dataset": dataset_id,
                "arrays": {k: list(v.shape) for k, v in feats.items()}}
    with open(os.path.join(cache_dir, f"{key}.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return feats
