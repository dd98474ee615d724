"""Pre-training configuration: nested dataclasses loaded from and dumped to YAML.

Key schema (all keys optional in a config file; omitted keys keep defaults)::

    data:     source, pyramid_dir, n_pyramids, base_size, texture_classes,
              resolution_probs, tile_size, tiles_per_pyramid, augment
    model:    encoder, decoder, head_hidden, head_bottleneck, head_bn, n_prototypes,
              share_mae_encoder
    masks:    ibot_ratio, mae_ratio
    loss:     w_dino, w_ibot, w_mae, w_koleo, lambda1, lambda2, fourier_cutoff,
              fourier_support, fourier_reduction, student_temp, teacher_temp,
              center_momentum, koleo_eps
    train:    seed, base_lr, warmup_epochs, total_epochs, batch_size, grad_accum,
              lr_floor_ratio, weight_decay, clip_grad, patch_size_probs,
              ema_start, ema_end, workers, prefetch, checkpoint_every
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field

import yaml

from .errors import InvalidArgumentError
from .objectives import LossWeights


@dataclass
class DataConfig:
    source: str = "synthetic"  # synthetic | pyramids | shard
    pyramid_dir: str = ""
    n_pyramids: int = 2000
    base_size: int = 768
    texture_classes: list = field(default_factory=lambda: ["stripes", "dots"])
    resolution_probs: list = field(default_factory=lambda: [0.25, 0.25, 0.25, 0.25])
    tile_size: int = 256
    tiles_per_pyramid: int = 1
    augment: bool = True


@dataclass
class ModelConfig:
    encoder: object = "vit-s"
    decoder: object = "default"
    head_hidden: int = 2048
    head_bottleneck: int = 256
    head_bn: bool = False
    n_prototypes: int = 65536
    share_mae_encoder: bool = True


@dataclass
class MaskConfig:
    ibot_ratio: float = 0.3
    mae_ratio: float = 0.75


@dataclass
class LossConfig:
    w_dino: float = 1.0
    w_ibot: float = 1.0
    w_mae: float = 1.0
    w_koleo: float = 0.1
    lambda1: float = 5.0
    lambda2: float = 1.0
    fourier_cutoff: float = 0.25
    fourier_support: str = "full"
    fourier_reduction: str = "mean"
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9
    koleo_eps: float = 1e-8

    def weights(self) -> LossWeights:
        return LossWeights(self.w_dino, self.w_ibot, self.w_mae, self.w_koleo, self.lambda1, self.lambda2)


@dataclass
class TrainConfig:
    seed: int = 0
    base_lr: float = 0.002
    warmup_epochs: int = 5
    total_epochs: int = 100
    batch_size: int = 64
    grad_accum: int = 1
    lr_floor_ratio: float = 0.01
    weight_decay: float = 0.04
    clip_grad: float = 3.0
    patch_size_probs: dict = field(default_factory=lambda: {8: 1 / 3, 16: 1 / 3, 32: 1 / 3})
    ema_start: float = 0.992
    ema_end: float = 1.0
    workers: int = 0
    prefetch: int = 4
    checkpoint_every: int = 1


@dataclass
class PretrainConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    masks: MaskConfig = field(default_factory=MaskConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> "PretrainConfig":
        t, m, d = self.train, self.masks, self.data
        if not 0 <= t.warmup_epochs <= t.total_epochs:
            raise InvalidArgumentError("warmup_epochs must lie in [0, total_epochs]")
        for name in ("ema_start", "ema_end"):
            if not 0.0 <= getattr(t, name) <= 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1]")
        if not m.mae_ratio > m.ibot_ratio:
            raise InvalidArgumentError("mae_ratio must exceed ibot_ratio")
        for name in ("ibot_ratio", "mae_ratio"):
            if not 0.0 <= getattr(m, name) < 1.0:
                raise InvalidArgumentError(f"{name} must lie in [0, 1)")
        probs = {int(k): float(v) for k, v in t.patch_size_probs.items()}
        if set(probs) - {8, 16, 32} or any(v < 0 for v in probs.values()) or abs(sum(probs.values()) - 1) > 1e-6:
            raise InvalidArgumentError(f"bad patch_size_probs {t.patch_size_probs}")
        t.patch_size_probs = probs
        if len(d.resolution_probs) != 4 or abs(sum(d.resolution_probs) - 1) > 1e-6:
            raise InvalidArgumentError("resolution_probs needs 4 entries summing to 1")
        if t.batch_size < 1 or t.grad_accum < 1 or t.batch_size % t.grad_accum:
            raise InvalidArgumentError("batch_size must be a positive multiple of grad_accum")
        self.loss.weights()
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _merge(section, values: dict, path: str):
    known = {f.name for f in dataclasses.fields(section)}
    for key, value in values.items():
        if key not in known:
            raise InvalidArgumentError(f"unknown config key {path}{key}")
        setattr(section, key, value)


def config_from_dict(raw: dict, base: PretrainConfig | None = None) -> PretrainConfig:
    """Overlay ``raw`` (section -> key -> value) on ``base`` (defaults when omitted)."""
    cfg = copy.deepcopy(base) if base is not None else PretrainConfig()
    for name, values in (raw or {}).items():
        if not hasattr(cfg, name):
            raise InvalidArgumentError(f"unknown config section {name}")
        if not isinstance(values, dict):
            raise InvalidArgumentError(f"config section {name} must be a mapping")
        _merge(getattr(cfg, name), values, f"{name}.")
    return cfg.validate()


def load_config(path: str, base: PretrainConfig | None = None) -> PretrainConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh) or {}, base)


def dump_config(cfg: PretrainConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False, default_flow_style=False)


def default_config_text() -> str:
    return dump_config(PretrainConfig().validate())


def desk_config(**train_overrides) -> PretrainConfig:
    """Small model preset used by tests and the toy end-to-end experiment."""
    cfg = PretrainConfig()
    cfg.model.encoder = "desk"
    cfg.model.decoder = "desk"
    cfg.model.head_hidden = 128
    cfg.model.head_bottleneck = 32
    cfg.model.n_prototypes = 256
    for key, value in train_overrides.items():
        setattr(cfg.train, key, value)
    return cfg.validate()
