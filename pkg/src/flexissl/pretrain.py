"""Student/teacher pre-training: schedules, EMA, the training step and the run loop."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from .backbone import FlexiViT, encoder_config
from .config import PretrainConfig
from .data import BatchPlan, CropBatch, iterate_batches, source_from_config
from .decoder import MAEDecoder, decoder_config, target_patches
from .errors import InvalidArgumentError, NumericError
from .masking import sample_ibot_mask, sample_mae_mask, stack_masks
from .objectives import (
    PART_NAMES,
    ProjectionHead,
    TeacherCentering,
    dino_loss,
    fourier_inputs,
    fourier_loss,
    ibot_loss,
    koleo_regularizer,
    low_pass_mask,
    mae_loss,
    total_loss,
)

logger = logging.getLogger(__name__)


class SSLNetwork(nn.Module):
    """Backbone plus DINO (CLS) and iBOT (patch) projection heads."""

    def __init__(self, cfg: PretrainConfig):
        super().__init__()
        m = cfg.model
        self.backbone = FlexiViT(encoder_config(m.encoder))
        d = self.backbone.embed_dim
        self.dino_head = ProjectionHead(d, m.n_prototypes, m.head_hidden, m.head_bottleneck, m.head_bn)
        self.ibot_head = ProjectionHead(d, m.n_prototypes, m.head_hidden, m.head_bottleneck, m.head_bn)


@dataclass
class TrainState:
    student: SSLNetwork
    teacher: SSLNetwork
    decoder: MAEDecoder
    dino_center: TeacherCentering
    ibot_center: TeacherCentering
    optimizer: torch.optim.Optimizer
    rng: np.random.Generator
    config: PretrainConfig
    steps_per_epoch: int
    step: int = 0
    mae_encoder: Optional[FlexiViT] = None
    history: list = field(default_factory=list)

    def trainable_modules(self) -> dict:
        mods = {"student": self.student, "decoder": self.decoder}
        if self.mae_encoder is not None:
            mods["mae_encoder"] = self.mae_encoder
        return mods

    @property
    def total_steps(self) -> int:
        return self.config.train.total_epochs * self.steps_per_epoch


def _param_groups(modules) -> list:
    decay, no_decay = [], []
    for mod in modules:
        for name, p in mod.named_parameters():
            if not p.requires_grad:
                continue
            # biases, norms, tokens and position tables are not decayed
            if p.ndim <= 1 or "pos" in name or "token" in name:
                no_decay.append(p)
            else:
                decay.append(p)
    return [{"params": decay, "weight_decay": None}, {"params": no_decay, "weight_decay": 0.0}]


def init_state(cfg: PretrainConfig, steps_per_epoch: int) -> TrainState:
    cfg.validate()
    seed = cfg.train.seed
    torch.manual_seed(seed)
    student = SSLNetwork(cfg)
    teacher = copy.deepcopy(student)
    for p in teacher.parameters():
        p.requires_grad_(False)
    decoder = MAEDecoder(student.backbone.embed_dim, decoder_config(cfg.model.decoder))
    mae_encoder = None if cfg.model.share_mae_encoder else FlexiViT(encoder_config(cfg.model.encoder))
    mods = [student, decoder] + ([mae_encoder] if mae_encoder is not None else [])
    groups = _param_groups(mods)
    groups[0]["weight_decay"] = cfg.train.weight_decay
    optimizer = torch.optim.AdamW(groups, lr=0.0, betas=(0.9, 0.999))
    k = cfg.model.n_prototypes
    return TrainState(
        student=student,
        teacher=teacher,
        decoder=decoder,
        dino_center=TeacherCentering(k, cfg.loss.center_momentum),
        ibot_center=TeacherCentering(k, cfg.loss.center_momentum),
        optimizer=optimizer,
        rng=np.random.default_rng(seed),
        config=cfg,
        steps_per_epoch=steps_per_epoch,
        mae_encoder=mae_encoder,
    )


# -- schedules ------------------------------------------------------------------------------


def lr_schedule(step: int, base_lr: float, warmup_steps: int, total_steps: int, floor_ratio: float = 0.01) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to ``base_lr * floor_ratio`` at the last step."""
    if step < 0:
        raise InvalidArgumentError("step must be non-negative")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    floor = base_lr * floor_ratio
    last = total_steps - 1
    if last <= warmup_steps:
        return base_lr if step == warmup_steps else floor
    t = min((step - warmup_steps) / (last - warmup_steps), 1.0)
    return base_lr - (base_lr - floor) * 0.5 * (1.0 - math.cos(math.pi * t))


def state_lr(state: TrainState, step: Optional[int] = None) -> float:
    t = state.config.train
    return lr_schedule(state.step if step is None else step, t.base_lr, t.warmup_epochs * state.steps_per_epoch,
                       state.total_steps, t.lr_floor_ratio)


def momentum_schedule(step: int, start: float, end: float, total_steps: int) -> float:
    """Cosine ramp of the EMA momentum from ``start`` to ``end``."""
    if total_steps <= 1:
        return end
    t = min(step / (total_steps - 1), 1.0)
    return end - (end - start) * 0.5 * (1.0 + math.cos(math.pi * t))


@torch.no_grad()
def ema_update(teacher: nn.Module, student: nn.Module, momentum: float) -> nn.Module:
    """teacher <- m * teacher + (1 - m) * student, parameter by parameter."""
    if not 0.0 <= momentum <= 1.0:
        raise InvalidArgumentError(f"momentum must lie in [0, 1], got {momentum}")
    t_params = dict(teacher.named_parameters())
    s_params = dict(student.named_parameters())
    if t_params.keys() != s_params.keys():
        raise InvalidArgumentError("teacher and student parameter names differ")
    for name, tp in t_params.items():
        sp = s_params[name]
        if tp.shape != sp.shape:
            raise InvalidArgumentError(f"shape mismatch for {name}: {tuple(tp.shape)} vs {tuple(sp.shape)}")
        if momentum == 1.0:
            continue
        if momentum == 0.0:
            tp.copy_(sp)
        else:
            # t + (1 - m)(s - t): exact fixed point when student equals teacher
            tp.lerp_(sp.detach(), 1.0 - momentum)
    return teacher


# -- one step --------------------------------------------------------------------------------


@dataclass
class StepPlan:
    patch_size: int
    ibot_masks: torch.Tensor  # (2B, N) in [view0 batch..., view1 batch...] order
    mae_masks: torch.Tensor


def draw_patch_size(rng: np.random.Generator, probs: dict) -> int:
    sizes = sorted(probs)
    p = np.array([probs[s] for s in sizes], dtype=np.float64)
    return int(sizes[int(rng.choice(len(sizes), p=p / p.sum()))])


def plan_step(state: TrainState, batch_size: int) -> StepPlan:
    cfg = state.config
    p = draw_patch_size(state.rng, cfg.train.patch_size_probs)
    g = 224 // p
    ibot = [sample_ibot_mask(g, cfg.masks.ibot_ratio, state.rng, p) for _ in range(2 * batch_size)]
    mae = [sample_mae_mask(g, cfg.masks.mae_ratio, state.rng, p) for _ in range(2 * batch_size)]
    return StepPlan(p, stack_masks(ibot), stack_masks(mae))


def _views(t: torch.Tensor) -> torch.Tensor:
    # (B, V, C, H, W) -> (V*B, C, H, W), view-major
    return t.transpose(0, 1).reshape(-1, *t.shape[2:])


def compute_loss_parts(state: TrainState, batch: CropBatch, plan: StepPlan, update_centers=True) -> dict:
    """Forward every path for one (micro-)batch and return the unweighted loss parts."""
    cfg = state.config
    lc = cfg.loss
    p = plan.patch_size
    g = _views(batch.globals)
    l = _views(batch.locals)

    with torch.no_grad():
        t_out = state.teacher.backbone(g, p)
        t_cls = state.teacher.dino_head(t_out.cls)
        t_dino = state.dino_center.probs(t_cls, lc.teacher_temp).chunk(2)
        t_patch_logits = state.teacher.ibot_head(t_out.patch_tokens[plan.ibot_masks])
        t_ibot = state.ibot_center.probs(t_patch_logits, lc.teacher_temp)

    s_g = state.student.backbone(g, p, mask=plan.ibot_masks)
    s_l = state.student.backbone(l, p)
    s_logits = list(state.student.dino_head(s_g.cls).chunk(2)) + list(state.student.dino_head(s_l.cls).chunk(4))
    parts = {"dino": dino_loss(s_logits, t_dino, lc.student_temp)}

    s_patch = state.student.ibot_head(s_g.patch_tokens[plan.ibot_masks])
    ones = torch.ones(1, s_patch.shape[0], dtype=torch.bool)
    parts["ibot"] = ibot_loss(s_patch.unsqueeze(0), t_ibot.unsqueeze(0), ones, lc.student_temp)
    parts["koleo"] = sum(koleo_regularizer(c, lc.koleo_eps) for c in s_g.cls.chunk(2)) / 2

    mae_enc = state.mae_encoder if state.mae_encoder is not None else state.student.backbone
    visible = mae_enc(g, p, drop_mask=plan.mae_masks)
    recon = state.decoder(visible, plan.mae_masks)
    parts["mae"] = mae_loss(recon.patches, target_patches(g, plan.mae_masks, p))
    y_hat, y = fourier_inputs(recon, g, lc.fourier_support)
    M = low_pass_mask(y.shape[-2:], lc.fourier_cutoff, y.dtype)
    parts["fourier"] = fourier_loss(y_hat, y, M, lc.lambda1, lc.lambda2, lc.fourier_reduction)

    if update_centers:
        state.dino_center.update(t_cls)
        if t_patch_logits.shape[0]:
            state.ibot_center.update(t_patch_logits)
    return parts


def train_step(state: TrainState, batch: CropBatch) -> tuple:
    """One optimization step; returns (state, parts) with float loss parts plus lr/momentum/patch size."""
    cfg = state.config
    accum = cfg.train.grad_accum
    plan = plan_step(state, len(batch))
    lr = state_lr(state)
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.zero_grad(set_to_none=True)
    weights = cfg.loss.weights()
    sums = {k: 0.0 for k in PART_NAMES + ("total",)}
    micro_b = len(batch) // accum
    for i, micro in enumerate(batch.split(accum)):
        sl = torch.cat([torch.arange(v * len(batch) + i * micro_b, v * len(batch) + (i + 1) * micro_b)
                        for v in range(2)])
        sub_plan = StepPlan(plan.patch_size, plan.ibot_masks[sl], plan.mae_masks[sl])
        parts = compute_loss_parts(state, micro, sub_plan)
        total = total_loss(parts, weights)
        if not torch.isfinite(total):
            raise NumericError("non-finite total loss", term="total")
        (total / accum).backward()
        for k, v in parts.items():
            sums[k] += float(v.detach()) / accum
        sums["total"] += float(total.detach()) / accum

    params = [p for group in state.optimizer.param_groups for p in group["params"]]
    if cfg.train.clip_grad and cfg.train.clip_grad > 0:
        torch.nn.utils.clip_grad_norm_(params, cfg.train.clip_grad)
    state.optimizer.step()
    m = momentum_schedule(state.step, cfg.train.ema_start, cfg.train.ema_end, state.total_steps)
    ema_update(state.teacher, state.student, m)
    state.step += 1
    sums.update(lr=lr, momentum=m, patch_size=plan.patch_size)
    return state, sums


# -- run loop ---------------------------------------------------------------------------------

METRIC_FIELDS = ("step", "epoch", "lr", "patch_size") + PART_NAMES + ("total",)


def pretrain(cfg: PretrainConfig, out_dir: str, resume: Optional[str] = None, dump_loss_parts: bool = False,
             max_steps: Optional[int] = None, source=None) -> TrainState:
    """Run pre-training, writing ``metrics.csv`` and ``checkpoint.npz`` under ``out_dir``."""
    from .checkpoint import load_state, save_state

    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    t = cfg.train
    source = source if source is not None else source_from_config(cfg.data, t.seed)
    plan = BatchPlan(len(source), t.batch_size, t.seed)
    if resume:
        state = load_state(resume)
        if state.steps_per_epoch != plan.steps_per_epoch:
            raise InvalidArgumentError("resumed checkpoint was trained with a different steps-per-epoch")
    else:
        state = init_state(cfg, plan.steps_per_epoch)
    stop = state.total_steps if max_steps is None else min(state.total_steps, state.step + max_steps)

    metrics_path = os.path.join(out_dir, "metrics.csv")
    parts_path = os.path.join(out_dir, "loss_parts.csv")
    new_file = not (resume and os.path.exists(metrics_path))
    mfh = open(metrics_path, "a" if not new_file else "w", newline="")
    mw = csv.writer(mfh)
    if new_file:
        mw.writerow(METRIC_FIELDS)
    pw = None
    if dump_loss_parts:
        pfh = open(parts_path, "a" if not new_file else "w", newline="")
        pw = csv.writer(pfh)
        if new_file:
            pw.writerow(("step", "term", "value", "weight", "weighted"))
    w = cfg.loss.weights()
    outer = {"dino": w.w_dino, "ibot": w.w_ibot, "mae": w.w_mae, "fourier": 1.0, "koleo": w.w_koleo}
    ckpt_path = os.path.join(out_dir, "checkpoint.npz")
    t0 = time.time()
    try:
        for step, batch in iterate_batches(source, plan, state.step, stop, cfg.data.augment, t.workers, t.prefetch):
            state, parts = train_step(state, batch)
            epoch = step // plan.steps_per_epoch
            state.history.append(parts)
            mw.writerow([step, epoch, f"{parts['lr']:.8g}", parts["patch_size"]]
                        + [f"{parts[k]:.8g}" for k in PART_NAMES] + [f"{parts['total']:.8g}"])
            if pw is not None:
                for k in PART_NAMES:
                    pw.writerow((step, k, f"{parts[k]:.8g}", outer[k], f"{outer[k] * parts[k]:.8g}"))
            mfh.flush()
            if (step + 1) % plan.steps_per_epoch == 0:
                logger.info("epoch %d done at step %d (%.1fs) total=%.4f", epoch, step + 1, time.time() - t0,
                            parts["total"])
                if t.checkpoint_every and (epoch + 1) % t.checkpoint_every == 0:
                    save_state(state, ckpt_path)
    finally:
        mfh.close()
        if pw is not None:
            pfh.close()
    save_state(state, ckpt_path)
    return state
