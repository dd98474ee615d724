"""Schedules, EMA, the training step and the run loop on a miniature configuration."""

import copy
import csv
import os

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from flexissl.data import BatchPlan, build_batch
from flexissl.errors import InvalidArgumentError, NumericError
from flexissl.masking import image_to_patches
from flexissl.pretrain import (
    StepPlan,
    compute_loss_parts,
    ema_update,
    init_state,
    lr_schedule,
    momentum_schedule,
    plan_step,
    pretrain,
    state_lr,
    train_step,
)
from helpers import fourier_oracle, koleo_np, mini_config, mini_source, soft_ce_np, softmax_np


@pytest.fixture(scope="module")
def source():
    return mini_source()


def _snapshot(module):
    return {k: v.detach().clone() for k, v in module.state_dict().items()}


def _same(a, b):
    return all(torch.equal(a[k], b[k]) for k in a)


class TestEma:
    def _pair(self, t, s):
        teacher, student = nn.Linear(1, 1, bias=False), nn.Linear(1, 1, bias=False)
        teacher.weight.data.fill_(t)
        student.weight.data.fill_(s)
        return teacher, student

    def test_interpolation_example(self):
        teacher, student = self._pair(2.0, 4.0)
        ema_update(teacher, student, 0.9)
        assert teacher.weight.item() == pytest.approx(2.2, abs=1e-6)

    def test_fixed_point_and_copy(self):
        teacher, student = self._pair(2.0, 4.0)
        ema_update(teacher, student, 1.0)
        assert teacher.weight.item() == 2.0
        ema_update(teacher, student, 0.0)
        assert teacher.weight.item() == 4.0

    def test_twice_equals_squared_momentum(self):
        torch.manual_seed(0)
        student = nn.Linear(4, 3).double()
        t1 = nn.Linear(4, 3).double()
        t2 = copy.deepcopy(t1)
        ema_update(ema_update(t1, student, 0.7), student, 0.7)
        ema_update(t2, student, 0.49)
        for a, b in zip(t1.parameters(), t2.parameters()):
            torch.testing.assert_close(a, b, rtol=0, atol=1e-12)

    def test_errors(self):
        teacher, student = self._pair(1.0, 1.0)
        with pytest.raises(InvalidArgumentError):
            ema_update(teacher, student, 1.5)
        with pytest.raises(InvalidArgumentError):
            ema_update(nn.Linear(2, 2), nn.Linear(3, 2), 0.5)


class TestSchedules:
    def test_lr_endpoints(self):
        spe = 31
        warm, total = 5 * spe, 100 * spe
        assert lr_schedule(0, 0.002, warm, total) == 0.0
        assert lr_schedule(warm, 0.002, warm, total) == 0.002
        assert lr_schedule(total - 1, 0.002, warm, total) == pytest.approx(0.002 / 100, rel=1e-12)

    def test_state_lr_uses_config(self):
        state = init_state(mini_config(warmup_epochs=1, total_epochs=3), steps_per_epoch=4)
        assert state_lr(state, 0) == 0.0
        assert state_lr(state, 4) == 0.002

    @given(warm=st.integers(1, 50), extra=st.integers(2, 200))
    @settings(max_examples=50, deadline=None)
    def test_lr_monotone_property(self, warm, extra):
        total = warm + extra
        lrs = [lr_schedule(s, 0.002, warm, total) for s in range(total)]
        assert all(a <= b for a, b in zip(lrs[:warm + 1], lrs[1:warm + 1]))
        assert all(a >= b for a, b in zip(lrs[warm:], lrs[warm + 1:]))

    def test_negative_step(self):
        with pytest.raises(InvalidArgumentError):
            lr_schedule(-1, 0.002, 5, 10)

    def test_momentum_endpoints(self):
        assert momentum_schedule(0, 0.992, 1.0, 100) == pytest.approx(0.992, abs=1e-15)
        assert momentum_schedule(99, 0.992, 1.0, 100) == 1.0
        ms = [momentum_schedule(s, 0.992, 1.0, 100) for s in range(100)]
        assert all(a <= b for a, b in zip(ms, ms[1:]))


class TestTrainStep:
    def test_deterministic(self, source):
        cfg = mini_config()
        plan = BatchPlan(len(source), 2, 0)
        curves = []
        for _ in range(2):
            state = init_state(cfg, plan.steps_per_epoch)
            curve = []
            for step in range(2):
                _, parts = train_step(state, build_batch(source, plan, step))
                curve.append(parts)
            curves.append(curve)
        assert curves[0] == curves[1]

    def test_zero_weights_leave_weights_unchanged(self, source):
        cfg = mini_config()
        for key in ("w_dino", "w_ibot", "w_mae", "w_koleo", "lambda1", "lambda2"):
            setattr(cfg.loss, key, 0.0)
        cfg.train.weight_decay = 0.0
        plan = BatchPlan(len(source), 2, 0)
        state = init_state(cfg, plan.steps_per_epoch)
        state.step = 1  # non-zero learning rate
        before = _snapshot(state.student), _snapshot(state.decoder), _snapshot(state.teacher)
        _, parts = train_step(state, build_batch(source, plan, 0))
        assert parts["total"] == 0.0 and parts["lr"] > 0
        after = _snapshot(state.student), _snapshot(state.decoder), _snapshot(state.teacher)
        assert all(_same(a, b) for a, b in zip(before, after))
        assert state.step == 2

    def test_no_gradient_reaches_teacher(self, source):
        cfg = mini_config()
        plan = BatchPlan(len(source), 2, 0)
        state = init_state(cfg, plan.steps_per_epoch)
        before = _snapshot(state.teacher)
        parts = compute_loss_parts(state, build_batch(source, plan, 0), plan_step(state, 2))
        sum(parts.values()).backward()
        assert all(p.grad is None for p in state.teacher.parameters())
        assert _same(before, _snapshot(state.teacher))
        assert any(p.grad is not None for p in state.student.parameters())

    def test_crop_routing(self, source):
        """Teacher sees only the 2B global crops; the student sees globals and 4B locals."""
        cfg = mini_config()
        plan = BatchPlan(len(source), 2, 0)
        state = init_state(cfg, plan.steps_per_epoch)
        seen = {"teacher": [], "student": []}
        hooks = [
            state.teacher.backbone.register_forward_hook(lambda m, a, o: seen["teacher"].append(tuple(a[0].shape))),
            state.student.backbone.register_forward_hook(lambda m, a, o: seen["student"].append(tuple(a[0].shape))),
        ]
        compute_loss_parts(state, build_batch(source, plan, 0), plan_step(state, 2))
        for h in hooks:
            h.remove()
        assert seen["teacher"] == [(4, 3, 224, 224)]
        assert sorted(seen["student"]) == [(4, 3, 224, 224), (4, 3, 224, 224), (8, 3, 96, 96)]

    def test_non_finite_loss_names_term(self, source):
        cfg = mini_config()
        plan = BatchPlan(len(source), 2, 0)
        state = init_state(cfg, plan.steps_per_epoch)
        with torch.no_grad():
            state.student.dino_head.prototypes.fill_(float("nan"))
        with pytest.raises(NumericError) as err:
            train_step(state, build_batch(source, plan, 0))
        assert err.value.term in {"dino", "ibot"}

    def test_grad_accumulation_runs(self, source):
        cfg = mini_config(grad_accum=2, batch_size=4)
        plan = BatchPlan(len(source), 4, 0)
        state = init_state(cfg, plan.steps_per_epoch)
        _, parts = train_step(state, build_batch(source, plan, 0))
        assert all(np.isfinite(parts[k]) for k in ("dino", "ibot", "mae", "fourier", "koleo", "total"))


def reference_parts(state, batch, plan):
    """Loss parts recomputed with NumPy oracles from the raw network outputs."""
    lc = state.config.loss
    p = plan.patch_size
    B = len(batch)
    g = torch.cat([batch.globals[:, 0], batch.globals[:, 1]])
    loc = torch.cat([batch.locals[:, v] for v in range(4)])
    with torch.no_grad():
        t_out = state.teacher.backbone(g, p)
        t_cls = state.teacher.dino_head(t_out.cls).double().numpy()
        t_patch = state.teacher.ibot_head(t_out.patch_tokens[plan.ibot_masks]).double().numpy()
        s_g = state.student.backbone(g, p, mask=plan.ibot_masks)
        s_l = state.student.backbone(loc, p)
        s_cls = [state.student.dino_head(s_g.cls).double().numpy(), state.student.dino_head(s_l.cls).double().numpy()]
        s_patch = state.student.ibot_head(s_g.patch_tokens[plan.ibot_masks]).double().numpy()
        rec = state.decoder(state.student.backbone(g, p, drop_mask=plan.mae_masks), plan.mae_masks)
    t_probs = softmax_np((t_cls - state.dino_center.center.double().numpy()) / lc.teacher_temp)
    teachers = [t_probs[:B], t_probs[B:]]
    students = [s_cls[0][:B], s_cls[0][B:]] + [s_cls[1][v * B:(v + 1) * B] for v in range(4)]
    dino = np.mean([soft_ce_np(t, s, lc.student_temp) for ti, t in enumerate(teachers)
                    for si, s in enumerate(students) if si != ti])
    t_patch_probs = softmax_np((t_patch - state.ibot_center.center.double().numpy()) / lc.teacher_temp)
    ibot = soft_ce_np(t_patch_probs, s_patch, lc.student_temp)
    cls = s_g.cls.double().numpy()
    koleo = (koleo_np(cls[:B], lc.koleo_eps) + koleo_np(cls[B:], lc.koleo_eps)) / 2

    img = g.double().numpy()
    pred = rec.patches.double().numpy()
    gs = 224 // p
    sq, full = [], img.copy()
    for b in range(2 * B):
        cells = np.flatnonzero(plan.mae_masks[b].numpy())
        for k, cell in enumerate(cells):
            r, c = divmod(int(cell), gs)
            patch = pred[b, k].reshape(3, p, p)
            sq.append((patch - img[b, :, r * p:(r + 1) * p, c * p:(c + 1) * p]) ** 2)
            full[b, :, r * p:(r + 1) * p, c * p:(c + 1) * p] = patch
    mae = float(np.mean(sq))
    f = np.fft.fftfreq(224)
    M = (np.sqrt(f[:, None] ** 2 + f[None, :] ** 2) <= lc.fourier_cutoff * 0.5).astype(np.float64)
    fourier = fourier_oracle(full - img, M, lc.lambda1, lc.lambda2) / (img.size * 224 * 224)
    return {"dino": dino, "ibot": ibot, "koleo": koleo, "mae": mae, "fourier": fourier}


def test_loss_parts_match_reference_after_one_step(source):
    """After one optimizer step, every loss part equals the NumPy reference for the next batch."""
    cfg = mini_config()
    plan = BatchPlan(len(source), 2, 0)
    state = init_state(cfg, plan.steps_per_epoch)
    train_step(state, build_batch(source, plan, 0))
    batch = build_batch(source, plan, 1)
    step_plan = plan_step(state, 2)
    ref = reference_parts(state, batch, step_plan)
    with torch.no_grad():
        got = compute_loss_parts(state, batch, step_plan, update_centers=False)
    for k, v in ref.items():
        assert float(got[k]) == pytest.approx(v, rel=2e-5, abs=1e-6), k
    assert isinstance(step_plan, StepPlan)
    assert image_to_patches(batch.globals[:, 0], 32).shape[1] == step_plan.mae_masks.shape[1]


class TestRunLoop:
    def test_metrics_and_checkpoint_written(self, tmp_path, source):
        cfg = mini_config(total_epochs=1, warmup_epochs=0)
        state = pretrain(cfg, str(tmp_path), source=source, dump_loss_parts=True)
        assert state.step == 2
        with open(tmp_path / "metrics.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [int(r["step"]) for r in rows] == [0, 1]
        assert os.path.exists(tmp_path / "checkpoint.npz")
        with open(tmp_path / "loss_parts.csv") as fh:
            parts = list(csv.DictReader(fh))
        assert len(parts) == 2 * 5
        koleo = [r for r in parts if r["term"] == "koleo"][0]
        assert float(koleo["weight"]) == 0.1

    def test_max_steps(self, tmp_path, source):
        state = pretrain(mini_config(), str(tmp_path), source=source, max_steps=1)
        assert state.step == 1

    def test_batch_larger_than_dataset(self, tmp_path):
        with pytest.raises(InvalidArgumentError):
            pretrain(mini_config(batch_size=8), str(tmp_path), source=mini_source(4))
