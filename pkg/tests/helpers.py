"""Shared test oracles: finite differences, NumPy loss references and a miniature trainer setup."""

import numpy as np
import torch

from flexissl.config import desk_config
from flexissl.data import SyntheticTileSource


def _central(fn, inputs, x, direction, h):
    with torch.no_grad():
        x += h * direction
        plus = fn(*inputs).item()
        x -= 2 * h * direction
        minus = fn(*inputs).item()
        x += h * direction
    return (plus - minus) / (2 * h)


def directional_fd(fn, inputs, x, direction, h=1e-4):
    """Central difference along ``direction`` with one Richardson step (error O(h^4))."""
    d1 = _central(fn, inputs, x, direction, h)
    d2 = _central(fn, inputs, x, direction, h / 2)
    return (4 * d2 - d1) / 3


def fd_relative_error(fn, inputs, n_coords=24, eps=1e-4, seed=0):
    """Largest relative error between autograd and central differences.

    ``fn`` maps float64 tensors to a scalar. For each input, ``n_coords`` random
    coordinates are checked, plus one random direction over the whole tensor.
    Relative error is |a - n| / max(|a|, |n|, 1e-6).
    """
    rng = np.random.default_rng(seed)
    inputs = [t.detach().clone().double().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    worst = 0.0
    for k, x in enumerate(inputs):
        g = grads[k] if grads[k] is not None else torch.zeros_like(x)
        idx = rng.choice(x.numel(), size=min(n_coords, x.numel()), replace=False)
        directions = []
        for i in idx:
            e = torch.zeros(x.numel(), dtype=x.dtype)
            e[i] = 1.0
            directions.append(e.reshape(x.shape))
        directions.append(torch.from_numpy(rng.standard_normal(x.shape)))
        for d in directions:
            a = (g * d).sum().item()
            n = directional_fd(fn, inputs, x, d, eps)
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-6))
    return worst


def dft_matrix(n):
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n)


def fourier_oracle(residual, M, lambda1, lambda2):
    """Two-band spectral energy by explicit DFT matrix products, one channel at a time."""
    r = np.asarray(residual, dtype=np.float64)
    h, w = r.shape[-2:]
    Fh, Fw = dft_matrix(h), dft_matrix(w)
    total = 0.0
    for chan in r.reshape(-1, h, w):
        power = np.abs(Fh @ chan @ Fw.T) ** 2
        total += lambda1 * (M * power).sum() + lambda2 * ((1 - M) * power).sum()
    return total


def softmax_np(x, axis=-1):
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def soft_ce_np(p, logits, tau):
    """Mean over rows of -sum p log softmax(logits / tau)."""
    return float(-(p * np.log(softmax_np(np.asarray(logits) / tau))).sum(-1).mean())


def koleo_np(x, eps):
    u = x / np.linalg.norm(x, axis=1, keepdims=True)
    d = np.linalg.norm(u[:, None] - u[None], axis=-1) + np.diag(np.full(len(u), np.inf))
    return float(-np.mean(np.log(d.min(1) + eps)))


def mini_config(**train):
    defaults = dict(batch_size=2, total_epochs=2, warmup_epochs=1, patch_size_probs={32: 1.0})
    defaults.update(train)
    cfg = desk_config(**defaults)
    cfg.model.encoder = "mini"
    cfg.model.decoder = "mini"
    cfg.model.head_hidden = 16
    cfg.model.head_bottleneck = 8
    cfg.model.n_prototypes = 16
    return cfg.validate()


def mini_source(n=4):
    return SyntheticTileSource(n, 256, ("stripes", "dots"), (1, 0, 0, 0), 224, seed=0)
