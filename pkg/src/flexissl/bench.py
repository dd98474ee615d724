"""Tiles-per-second benchmark for the tile and MIL inference paths."""

from __future__ import annotations

import logging
import os
import platform
import statistics
import threading
import time
from dataclasses import asdict, dataclass, field

import torch

from .adaptation import AdditiveMIL, LinearHead
from .backbone import FlexiViT, encoder_config
from .errors import InvalidArgumentError

logger = logging.getLogger(__name__)

TILE_SIZE = 224
DEFAULT_BATCH = 32
MIN_REPS = 3

# benches measure wall time, so two of them must never overlap in one process
_EXCLUSIVE = threading.Lock()


@dataclass
class ThroughputReport:
    task: str
    patch_size: int
    tile_size: int
    tiles_per_second: float
    hardware: str
    batch_size: int = DEFAULT_BATCH
    repetitions: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["repetitions"] = ";".join(f"{r:.6g}" for r in self.repetitions)
        return d


def hardware_descriptor() -> str:
    cpu = platform.processor() or platform.machine()
    return (f"{platform.system()} {cpu} cpus={os.cpu_count()} torch_threads={torch.get_num_threads()} "
            f"torch={torch.__version__}")


def _resolve_backbone(backbone_config) -> FlexiViT:
    if isinstance(backbone_config, FlexiViT):
        return backbone_config
    if isinstance(backbone_config, str) and os.path.exists(backbone_config):
        from .checkpoint import load_teacher_backbone

        return load_teacher_backbone(backbone_config)
    torch.manual_seed(0)
    return FlexiViT(encoder_config(backbone_config))


def throughput_bench(backbone_config, head: str = "tile", patch_size: int = 16, duration: float = 5.0,
                     batch_size: int = DEFAULT_BATCH, repetitions: int = MIN_REPS, seed: int = 0) -> ThroughputReport:
    """Median tiles/second of backbone + head inference over ``repetitions`` timed runs.

    Input batches are generated before timing starts. Model construction and one
    warmup batch are excluded. ``duration`` is the total timed budget in seconds,
    split evenly between repetitions; each repetition runs at least one batch.
    """
    if head not in ("tile", "mil"):
        raise InvalidArgumentError(f"head must be 'tile' or 'mil', got {head!r}")
    if batch_size < 1:
        raise InvalidArgumentError("batch_size must be positive")
    repetitions = max(MIN_REPS, int(repetitions))
    model = _resolve_backbone(backbone_config).eval()
    dim = model.embed_dim
    torch.manual_seed(seed)
    head_mod = LinearHead(dim, 2) if head == "tile" else AdditiveMIL(dim, 2)
    head_mod.eval()
    gen = torch.Generator().manual_seed(seed)
    batch = torch.rand(batch_size, 3, TILE_SIZE, TILE_SIZE, generator=gen)

    @torch.inference_mode()
    def run_once():
        out = model(batch, patch_size)
        # for "mil" the whole batch forms one bag, as when scoring the tiles of one slide
        head_mod(out.cls)

    with _EXCLUSIVE:
        t0 = time.perf_counter()
        run_once()
        warm = time.perf_counter() - t0
        if duration <= 0 or duration < warm:
            raise InvalidArgumentError(
                f"duration {duration:.3g}s is shorter than one batch ({warm:.3g}s at batch size {batch_size})"
            )
        per_rep = duration / repetitions
        n_batches = max(1, int(per_rep / warm))
        rates = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            for _ in range(n_batches):
                run_once()
            rates.append(n_batches * batch_size / (time.perf_counter() - t0))
    tps = statistics.median(rates)
    logger.info("bench %s p=%d: %.2f tiles/s (reps %s)", head, patch_size, tps, [round(r, 2) for r in rates])
    return ThroughputReport(head, patch_size, TILE_SIZE, float(tps), hardware_descriptor(), batch_size,
                            [float(r) for r in rates])


def bench_sweep(backbone_config, head="tile", patch_sizes=(8, 16, 32), duration=5.0, batch_size=DEFAULT_BATCH,
                seed=0) -> list:
    model = _resolve_backbone(backbone_config)
    return [throughput_bench(model, head, p, duration, batch_size, seed=seed) for p in patch_sizes]


def speed_ratios(reports: list, reference_patch: int = 8) -> dict:
    base = {r.patch_size: r.tiles_per_second for r in reports}
    if reference_patch not in base:
        raise InvalidArgumentError(f"no report at patch size {reference_patch}")
    return {p: v / base[reference_patch] for p, v in sorted(base.items())}

