"""Loss terms: DINO, iBOT, KoLeo, MAE pixel L2, the two-band Fourier loss, and their sum."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgumentError, NumericError

KOLEO_EPS = 1e-8


@dataclass
class LossWeights:
    w_dino: float = 1.0
    w_ibot: float = 1.0
    w_mae: float = 1.0
    w_koleo: float = 0.1
    lambda1: float = 5.0
    lambda2: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise InvalidArgumentError(f"loss weight {name} must be non-negative, got {value}")


# -- projection heads and teacher centering ------------------------------------------


class ProjectionHead(nn.Module):
    """3-layer MLP, L2-normalized bottleneck, then a cosine prototype layer with K outputs.

    ``use_bn`` inserts batch normalization after the two hidden layers. It keeps
    the per-sample spread of the logits at order one when the backbone output
    barely depends on its input, as with a small freshly initialized encoder.
    """

    def __init__(self, in_dim, out_dim, hidden_dim=2048, bottleneck_dim=256, use_bn=False):
        super().__init__()
        norm = nn.BatchNorm1d if use_bn else nn.Identity
        self.mlp = nn.Sequential(
            nn.Linear(in_dim, hidden_dim),
            norm(hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, hidden_dim),
            norm(hidden_dim),
            nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim),
        )
        self.prototypes = nn.Parameter(torch.empty(out_dim, bottleneck_dim))
        for m in self.mlp:
            if isinstance(m, nn.Linear):
                nn.init.trunc_normal_(m.weight, std=0.02)
                nn.init.zeros_(m.bias)
        nn.init.trunc_normal_(self.prototypes, std=0.02)

    def forward(self, x):
        z = F.normalize(self.mlp(x), dim=-1)
        return z @ F.normalize(self.prototypes, dim=-1).T


class TeacherCentering(nn.Module):
    """Running center subtracted from teacher logits before sharpening."""

    def __init__(self, dim, momentum=0.9):
        super().__init__()
        self.momentum = momentum
        self.register_buffer("center", torch.zeros(dim))

    def probs(self, teacher_logits, temp):
        return F.softmax((teacher_logits - self.center) / temp, dim=-1)

    @torch.no_grad()
    def update(self, teacher_logits):
        batch_center = teacher_logits.reshape(-1, teacher_logits.shape[-1]).mean(0)
        self.center.mul_(self.momentum).add_(batch_center, alpha=1 - self.momentum)


# -- self-distillation losses ----------------------------------------------------------


def _finite(value: torch.Tensor, term: str) -> torch.Tensor:
    if not torch.isfinite(value).all():
        raise NumericError(f"non-finite {term} loss", term=term)
    return value


def cross_entropy_soft(teacher_probs: torch.Tensor, student_logits: torch.Tensor, student_temp: float):
    """Per-row -sum p_t log softmax(s / tau_s)."""
    return -(teacher_probs * F.log_softmax(student_logits / student_temp, dim=-1)).sum(-1)


def dino_loss(
    student_logits: Sequence[torch.Tensor],
    teacher_probs: Sequence[torch.Tensor],
    student_temp: float = 0.1,
) -> torch.Tensor:
    """Cross-entropy of every student crop against every teacher global view.

    ``student_logits`` lists (B, K) logits per crop with the global crops first,
    in the same order as ``teacher_probs`` (already centered and sharpened).
    Pairs where the student and teacher saw the same view are skipped.
    """
    for t in list(student_logits) + list(teacher_probs):
        _finite(t, "dino")
    total, n_pairs = 0.0, 0
    for ti, tp in enumerate(teacher_probs):
        for si, sl in enumerate(student_logits):
            if si == ti:
                continue
            total = total + cross_entropy_soft(tp, sl, student_temp).mean()
            n_pairs += 1
    if n_pairs == 0:
        raise InvalidArgumentError("dino loss needs at least one cross-view pair")
    return total / n_pairs


def ibot_loss(
    student_patch_logits: torch.Tensor,
    teacher_patch_probs: torch.Tensor,
    mask: torch.Tensor,
    student_temp: float = 0.1,
    return_empty: bool = False,
):
    """Mean patch-wise cross-entropy over masked cells.

    Logits/probs are (B, N, K) on the same grid and ``mask`` is (B, N) bool.
    An empty mask yields zero (still attached to the graph); with
    ``return_empty=True`` the result is a (loss, mask_was_empty) pair.
    """
    _finite(student_patch_logits, "ibot")
    _finite(teacher_patch_probs, "ibot")
    if student_patch_logits.shape != teacher_patch_probs.shape:
        raise InvalidArgumentError("student and teacher patch logits must share a grid")
    empty = not bool(mask.any())
    if empty:
        loss = student_patch_logits.sum() * 0.0
    else:
        loss = cross_entropy_soft(teacher_patch_probs[mask], student_patch_logits[mask], student_temp).mean()
    return (loss, empty) if return_empty else loss


def koleo_regularizer(embeddings: torch.Tensor, eps: float = KOLEO_EPS) -> torch.Tensor:
    """-(1/n) sum_i log(d_i + eps), d_i the nearest-neighbour distance after L2 normalization.

    Bounded below by -log(2 + eps) since unit vectors are at most 2 apart.
    """
    if embeddings.ndim != 2 or embeddings.shape[0] < 2:
        raise InvalidArgumentError("koleo needs a batch of at least 2 embeddings")
    x = F.normalize(embeddings, dim=-1, eps=1e-12)
    with torch.no_grad():
        sim = x @ x.T
        sim.fill_diagonal_(-math.inf)
        nn_idx = sim.argmax(dim=1)
    sq = (x - x[nn_idx]).pow(2).sum(-1)
    # keep sqrt off zero so duplicated points give -log(eps) with a finite gradient
    positive = sq > 0
    dist = torch.where(positive, torch.sqrt(torch.where(positive, sq, torch.ones_like(sq))), torch.zeros_like(sq))
    return _finite(-torch.log(dist + eps).mean(), "koleo")


KOLEO_LOWER_BOUND = -math.log(2 + KOLEO_EPS)


# -- reconstruction losses ----------------------------------------------------------------


def mae_loss(pred_patches: torch.Tensor, target_patches: torch.Tensor) -> torch.Tensor:
    """Mean squared error over masked pixels; both inputs hold masked patches only."""
    if pred_patches.shape != target_patches.shape:
        raise InvalidArgumentError(
            f"prediction {tuple(pred_patches.shape)} vs target {tuple(target_patches.shape)}"
        )
    if pred_patches.numel() == 0:
        raise InvalidArgumentError("empty mask: no pixels to compare")
    return _finite(((pred_patches - target_patches) ** 2).mean(), "mae")


def low_pass_mask(shape, cutoff: float = 0.25, dtype=torch.float64) -> torch.Tensor:
    """Circular low-pass filter on the unshifted DFT grid of a (H, W) raster.

    ``cutoff`` is the radius as a fraction of the Nyquist frequency (0.5 cycles/pixel).
    """
    h, w = shape
    fy = torch.fft.fftfreq(h, dtype=torch.float64)
    fx = torch.fft.fftfreq(w, dtype=torch.float64)
    radius = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2)
    return (radius <= cutoff * 0.5).to(dtype)


def fourier_loss(
    y_hat: torch.Tensor,
    y: torch.Tensor,
    M: torch.Tensor,
    lambda1: float = 5.0,
    lambda2: float = 1.0,
    reduction: str = "sum",
) -> torch.Tensor:
    """lambda1 * ||M (F(y_hat) - F(y))||^2 + lambda2 * ||(1 - M)(F(y_hat) - F(y))||^2.

    The 2-D DFT is unnormalized and taken per channel over the last two axes.
    ``reduction="sum"`` sums squared magnitudes over every frequency, channel and
    batch element; ``"mean"`` divides that sum by (number of elements) * H * W,
    which turns the all-pass case into a per-pixel mean squared error.
    """
    if y_hat.shape != y.shape:
        raise InvalidArgumentError(f"shape mismatch {tuple(y_hat.shape)} vs {tuple(y.shape)}")
    if tuple(M.shape) != tuple(y.shape[-2:]):
        raise InvalidArgumentError(f"filter shape {tuple(M.shape)} vs raster {tuple(y.shape[-2:])}")
    spec = torch.fft.fft2(y_hat - y)
    power = spec.real**2 + spec.imag**2
    m = M.to(power.dtype)
    total = lambda1 * (m * power).sum() + lambda2 * ((1 - m) * power).sum()
    if reduction == "mean":
        h, w = y.shape[-2:]
        total = total / (y.numel() * h * w)
    elif reduction != "sum":
        raise InvalidArgumentError(f"unknown reduction {reduction!r}")
    return _finite(total, "fourier")


def fourier_inputs(reconstruction, target: torch.Tensor, support: str = "full") -> tuple:
    """Assemble (y_hat, y) rasters for the Fourier loss.

    ``full``: predictions pasted into the target at masked cells, ground truth elsewhere.
    ``masked_zeroed``: both rasters zeroed outside masked cells. Since the loss only
    depends on y_hat - y, the two supports give the same value.
    """
    from .masking import mask_to_pixels

    y_hat = reconstruction.assemble(target)
    if support == "full":
        return y_hat, target
    if support == "masked_zeroed":
        pix = mask_to_pixels(reconstruction.mask, reconstruction.patch_size, target.shape[-2:]).to(target.dtype)
        return y_hat * pix, target * pix
    raise InvalidArgumentError(f"unknown fourier support {support!r}")


# -- total -----------------------------------------------------------------------------------

PART_NAMES = ("dino", "ibot", "mae", "fourier", "koleo")


def total_loss(parts: Mapping[str, torch.Tensor], weights: LossWeights = LossWeights()) -> torch.Tensor:
    """w_dino*dino + w_ibot*ibot + w_mae*mae + fourier + w_koleo*koleo.

    The Fourier term carries its band weights internally, so it is added as is.
    """
    outer = {"dino": weights.w_dino, "ibot": weights.w_ibot, "mae": weights.w_mae, "fourier": 1.0,
             "koleo": weights.w_koleo}
    total = 0.0
    for name in PART_NAMES:
        if name not in parts:
            continue
        value = torch.as_tensor(parts[name])
        if not torch.isfinite(value).all():
            raise NumericError(f"non-finite {name} loss", term=name)
        total = total + outer[name] * value
    return torch.as_tensor(total)
