"""Synthetic downstream benchmarks and the end-to-end report bundle.

Three labelled datasets are derived from the synthetic pyramids:

* texture tiles: one 224 px tile per pyramid, labelled by the pyramid texture;
* cell tiles: a texture tile whose central 48 px square is pasted from a second
  tile; the label is the texture at the center, so only local evidence decides it;
* MIL bags: tiles from a negative-texture pyramid, with 1 to bag_size/2 tiles
  replaced by positive-texture tiles in positive bags.
"""

from __future__ import annotations

import csv
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch

from . import metrics
from .adaptation import (CELL_PATCH, TISSUE_PATCH, FitConfig, MILBag, cached_features, export_contributions,
                         extract_features, finetune_mil, fit_head, predict)
from .bench import throughput_bench
from .checkpoint import file_hash, load_teacher_backbone
from .data import SyntheticTileSource
from .errors import CheckpointError, InvalidArgumentError, UndefinedMetricError
from .pyramid import derive_seed

logger = logging.getLogger(__name__)

TILE = 224
CELL_SIZE = 48
TASKS = ("linear", "attentive", "center-cell", "mil", "mil-finetune")


@dataclass
class TileDataset:
    name: str
    pixels: np.ndarray  # (N, 224, 224, 3) float32 in [0, 1]
    labels: np.ndarray  # (N,)
    coords: np.ndarray  # (N, 2) tile origin at its level
    seed: int

    def __len__(self):
        return len(self.labels)

    @property
    def dataset_id(self) -> str:
        return f"{self.name}-n{len(self)}-s{self.seed}"


@dataclass
class BagDataset:
    name: str
    bags: list  # list of (n_tiles, 224, 224, 3) arrays
    labels: np.ndarray
    coords: list
    seed: int

    def __len__(self):
        return len(self.labels)

    @property
    def dataset_id(self) -> str:
        return f"{self.name}-n{len(self)}-s{self.seed}"


def _source(n_pyramids, seed, classes, base_size, resolution_probs, tiles_per_pyramid=1):
    return SyntheticTileSource(n_pyramids, base_size, classes, resolution_probs, TILE, tiles_per_pyramid, seed,
                               cache=False)


def make_texture_tiles(n: int, seed: int, classes=("stripes", "dots"), base_size: int = 512,
                       resolution_probs=(0.5, 0.5, 0.0, 0.0)) -> TileDataset:
    src = _source(n, seed, classes, base_size, resolution_probs)
    tiles = [src.tile(i) for i in range(n)]
    return TileDataset(
        "texture",
        np.stack([t.pixels for t in tiles]).astype(np.float32),
        np.array([i % len(classes) for i in range(n)]),
        np.array([t.origin[1:] for t in tiles]),
        seed,
    )


def make_cell_tiles(n: int, seed: int, classes=("stripes", "dots"), base_size: int = 512,
                    resolution_probs=(0.5, 0.5, 0.0, 0.0)) -> TileDataset:
    pool = make_texture_tiles(2 * n, derive_seed(seed, 11), classes, base_size, resolution_probs)
    rng = np.random.default_rng(derive_seed(seed, 12))
    lo = (TILE - CELL_SIZE) // 2
    pixels = np.empty((n, TILE, TILE, 3), np.float32)
    labels = np.empty(n, np.int64)
    for i in range(n):
        bg, fg = rng.choice(2 * n, size=2, replace=False)
        pixels[i] = pool.pixels[bg]
        pixels[i, lo : lo + CELL_SIZE, lo : lo + CELL_SIZE] = pool.pixels[fg, lo : lo + CELL_SIZE, lo : lo + CELL_SIZE]
        labels[i] = pool.labels[fg]
    return TileDataset("cell", pixels, labels, pool.coords[:n], seed)


def make_mil_bags(n_bags: int, bag_size: int, seed: int, classes=("stripes", "dots"), base_size: int = 512,
                  resolution_probs=(0.5, 0.5, 0.0, 0.0)) -> BagDataset:
    """Bag i has label i % 2; pyramid 2i is negative texture and 2i+1 positive texture."""
    if bag_size < 2:
        raise InvalidArgumentError("bags need at least two tiles")
    src = _source(2 * n_bags, seed, classes[:2], base_size, resolution_probs, tiles_per_pyramid=bag_size)
    rng = np.random.default_rng(derive_seed(seed, 13))
    bags, labels, coords = [], [], []
    for b in range(n_bags):
        tiles = [src.tile(2 * b * bag_size + j) for j in range(bag_size)]
        label = b % 2
        if label:
            k = int(rng.integers(1, bag_size // 2 + 1))
            for j in rng.choice(bag_size, size=k, replace=False):
                tiles[j] = src.tile((2 * b + 1) * bag_size + int(j))
        bags.append(np.stack([t.pixels for t in tiles]).astype(np.float32))
        coords.append(np.array([t.origin[1:] for t in tiles]))
        labels.append(label)
    return BagDataset("bags", bags, np.array(labels), coords, seed)


def standardize(train: np.ndarray, test: np.ndarray) -> tuple:
    """Z-score both arrays with the per-channel statistics of ``train`` (last axis)."""
    flat = train.reshape(-1, train.shape[-1])
    mu = flat.mean(0)
    sd = flat.std(0) + 1e-6
    return (train - mu) / sd, (test - mu) / sd


PROBE_FIT = FitConfig(epochs=200, lr=1e-2, batch_size=64)


def probe_accuracy(backbone, train: TileDataset, test: TileDataset, patch_size: int = TISSUE_PATCH,
                   fit: FitConfig = PROBE_FIT) -> float:
    """Held-out accuracy of a linear probe on standardized frozen CLS features."""
    f_tr = extract_features(backbone, train.pixels, patch_size)["cls"]
    f_te = extract_features(backbone, test.pixels, patch_size)["cls"]
    f_tr, f_te = standardize(f_tr, f_te)
    cfg = FitConfig(**{**asdict(fit), "n_classes": int(max(train.labels.max(), test.labels.max())) + 1})
    head = fit_head("linear", torch.from_numpy(f_tr), train.labels, cfg)
    pred, _ = predict(head, torch.from_numpy(f_te))
    return float((pred == test.labels).mean())


# -- suite ----------------------------------------------------------------------------------


@dataclass
class SuiteConfig:
    checkpoint: str
    out_dir: str
    seed: int = 0
    tasks: list = field(default_factory=lambda: ["linear", "attentive", "center-cell", "mil"])
    classes: list = field(default_factory=lambda: ["stripes", "dots"])
    base_size: int = 512
    n_train: int = 200
    n_test: int = 200
    n_bags_train: int = 40
    n_bags_test: int = 40
    bag_size: int = 8
    fit_epochs: int = 100
    fit_lr: float = 1e-3
    n_bootstrap: int = metrics.N_BOOTSTRAP
    bench: bool = True
    bench_heads: list = field(default_factory=lambda: ["tile", "mil"])
    bench_patch_sizes: list = field(default_factory=lambda: [8, 16, 32])
    bench_duration: float = 3.0
    bench_batch_size: int = 8
    cache_dir: Optional[str] = None

    def validate(self) -> "SuiteConfig":
        unknown = set(self.tasks) - set(TASKS)
        if unknown:
            raise InvalidArgumentError(f"unknown tasks {sorted(unknown)}; choose from {TASKS}")
        if not self.tasks:
            raise InvalidArgumentError("no tasks configured")
        return self


def suite_config_from_dict(raw: dict) -> SuiteConfig:
    known = set(SuiteConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise InvalidArgumentError(f"unknown suite keys {sorted(unknown)}")
    return SuiteConfig(**raw).validate()


@dataclass
class TaskResult:
    task: str
    reports: list  # MetricReport per metric
    n_test: int


def _score_reports(task, pred, probs, labels, n_classes, cfg: SuiteConfig) -> TaskResult:
    seed = derive_seed(cfg.seed, 21)
    f1 = metrics.bootstrap(lambda p, y: metrics.macro_f1(p, y, n_classes), (pred, labels), cfg.n_bootstrap, seed,
                           f"{task}/macro_f1")
    scores = probs[:, 1] if n_classes == 2 else probs
    try:
        au = metrics.bootstrap(metrics.auroc, (scores, labels), cfg.n_bootstrap, seed, f"{task}/auroc")
        reports = [f1, au]
    except UndefinedMetricError:
        logger.warning("%s: AUROC undefined on the test split (single class)", task)
        reports = [f1]
    return TaskResult(task, reports, len(labels))


class _FeatureStore:
    def __init__(self, backbone, ckpt_hash, cache_dir):
        self.backbone = backbone
        self.ckpt_hash = ckpt_hash
        self.cache_dir = cache_dir

    def tiles(self, ds: TileDataset, patch_size: int) -> dict:
        return cached_features(self.cache_dir, self.ckpt_hash, patch_size, ds.dataset_id,
                               lambda: extract_features(self.backbone, ds.pixels, patch_size))

    def bags(self, ds: BagDataset, patch_size: int) -> list:
        flat = np.concatenate(ds.bags)
        feats = cached_features(self.cache_dir, self.ckpt_hash, patch_size, ds.dataset_id,
                                lambda: {"cls": extract_features(self.backbone, flat, patch_size)["cls"]})["cls"]
        sizes = np.cumsum([0] + [len(b) for b in ds.bags])
        return [feats[sizes[i] : sizes[i + 1]] for i in range(len(ds.bags))]


def _fit_cfg(cfg: SuiteConfig, n_classes: int) -> FitConfig:
    return FitConfig(n_classes=n_classes, epochs=cfg.fit_epochs, lr=cfg.fit_lr, seed=cfg.seed)


def _run_tile_task(task, store, cfg, data) -> TaskResult:
    if task == "center-cell":
        train, test, p = data["cell_train"], data["cell_test"], CELL_PATCH
    else:
        train, test, p = data["tex_train"], data["tex_test"], TISSUE_PATCH
    n_classes = len(cfg.classes)
    tr, te = store.tiles(train, p), store.tiles(test, p)
    fit = _fit_cfg(cfg, n_classes)
    if task == "linear":
        x_tr, x_te = standardize(tr["cls"], te["cls"])
        head = fit_head("linear", torch.from_numpy(x_tr), train.labels, fit)
        pred, probs = predict(head, torch.from_numpy(x_te))
    else:
        c_tr, c_te = standardize(tr["cls"], te["cls"])
        t_tr, t_te = standardize(tr["patch"], te["patch"])
        kind = "attentive" if task == "attentive" else "center-cell"
        head = fit_head(kind, (torch.from_numpy(c_tr), torch.from_numpy(t_tr)), train.labels, fit)
        pred, probs = predict(head, (torch.from_numpy(c_te), torch.from_numpy(t_te)))
    return _score_reports(task, pred, probs, test.labels, n_classes, cfg)


def _run_mil_task(task, store, cfg, data, report_dir) -> TaskResult:
    train, test = data["bags_train"], data["bags_test"]
    fit = _fit_cfg(cfg, 2)
    if task == "mil":
        f_tr, f_te = store.bags(train, TISSUE_PATCH), store.bags(test, TISSUE_PATCH)
        x_tr, x_te = standardize(np.concatenate(f_tr), np.concatenate(f_te))
        split_tr = np.cumsum([0] + [len(b) for b in f_tr])
        split_te = np.cumsum([0] + [len(b) for b in f_te])
        bags_tr = [MILBag(x_tr[split_tr[i] : split_tr[i + 1]], int(train.labels[i]), train.coords[i])
                   for i in range(len(f_tr))]
        bags_te = [MILBag(x_te[split_te[i] : split_te[i + 1]], int(test.labels[i]), test.coords[i])
                   for i in range(len(f_te))]
        head = fit_head("mil", bags_tr, train.labels, fit)
        pred, probs = predict(head, bags_te)
        with torch.no_grad():
            export_contributions(bags_te[0], head(bags_te[0].tile_features),
                                 os.path.join(report_dir, "mil_contributions.csv"))
    else:
        model, head = finetune_mil(store.backbone, train.bags, train.labels, fit, TISSUE_PATCH)
        with torch.no_grad():
            feats = [model(torch.from_numpy(b.transpose(0, 3, 1, 2).copy()), TISSUE_PATCH).cls for b in test.bags]
            bags_te = [MILBag(f, int(y)) for f, y in zip(feats, test.labels)]
            pred, probs = predict(head, bags_te)
    return _score_reports(task, pred, probs, test.labels, 2, cfg)


def build_datasets(cfg: SuiteConfig) -> dict:
    """Synthetic train/test splits for the configured tasks; test splits use disjoint seeds."""
    data = {}
    kw = dict(classes=tuple(cfg.classes), base_size=cfg.base_size)
    if {"linear", "attentive"} & set(cfg.tasks):
        data["tex_train"] = make_texture_tiles(cfg.n_train, derive_seed(cfg.seed, 1), **kw)
        data["tex_test"] = make_texture_tiles(cfg.n_test, derive_seed(cfg.seed, 2), **kw)
    if "center-cell" in cfg.tasks:
        data["cell_train"] = make_cell_tiles(cfg.n_train, derive_seed(cfg.seed, 3), **kw)
        data["cell_test"] = make_cell_tiles(cfg.n_test, derive_seed(cfg.seed, 4), **kw)
    if {"mil", "mil-finetune"} & set(cfg.tasks):
        data["bags_train"] = make_mil_bags(cfg.n_bags_train, cfg.bag_size, derive_seed(cfg.seed, 5), **kw)
        data["bags_test"] = make_mil_bags(cfg.n_bags_test, cfg.bag_size, derive_seed(cfg.seed, 6), **kw)
    return data


METRIC_COLUMNS = ("task", "metric", "point", "mean", "std", "n_bootstrap", "seed", "redrawn", "n_test")
THROUGHPUT_COLUMNS = ("task", "patch_size", "tile_size", "tiles_per_second", "batch_size", "repetitions", "hardware")


@dataclass
class SuiteReport:
    directory: str
    tasks: list
    throughput: list

    def metric_rows(self) -> list:
        rows = []
        for t in self.tasks:
            for r in t.reports:
                d = r.to_dict()
                rows.append({"task": t.task, "metric": d["metric"].split("/")[-1], "point": d["point"],
                             "mean": d["mean"], "std": d["std"], "n_bootstrap": d["n_bootstrap"], "seed": d["seed"],
                             "redrawn": d["redrawn"], "n_test": t.n_test})
        return rows


def write_metrics_csv(rows: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


def write_throughput_csv(reports: list, path: str) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=THROUGHPUT_COLUMNS)
        w.writeheader()
        for r in reports:
            d = r.to_dict()
            w.writerow({k: (f"{d[k]:.6g}" if isinstance(d[k], float) else d[k]) for k in THROUGHPUT_COLUMNS})


def summary_text(report: SuiteReport, checkpoint: str = "") -> str:
    lines = [f"checkpoint: {checkpoint}"] if checkpoint else []
    for row in report.metric_rows():
        lines.append(f"{row['task']:<14} {row['metric']:<9} point={row['point']:.4f} "
                     f"mean={row['mean']:.4f} std={row['std']:.4f} (n={row['n_bootstrap']}, test={row['n_test']})")
    for r in report.throughput:
        lines.append(f"throughput {r.task:<5} p={r.patch_size:<3} {r.tiles_per_second:9.2f} tiles/s")
    if report.throughput:
        lines.append(f"hardware: {report.throughput[0].hardware}")
    return "\n".join(lines) + "\n"


def run_benchmark_suite(cfg: SuiteConfig) -> SuiteReport:
    """synthetic data -> frozen features -> head fitting -> bootstrap metrics -> throughput.

    Writes ``metrics.csv``, ``throughput.csv``, ``summary.txt`` and ``suite.json``
    into ``cfg.out_dir``.
    """
    cfg.validate()
    if not cfg.checkpoint or not os.path.isfile(cfg.checkpoint):
        raise CheckpointError(f"checkpoint not found: {cfg.checkpoint!r}")
    backbone = load_teacher_backbone(cfg.checkpoint)
    os.makedirs(cfg.out_dir, exist_ok=True)
    store = _FeatureStore(backbone, file_hash(cfg.checkpoint), cfg.cache_dir or os.path.join(cfg.out_dir, "features"))
    torch.manual_seed(cfg.seed)
    data = build_datasets(cfg)
    results = []
    for task in cfg.tasks:
        logger.info("suite: task %s", task)
        if task.startswith("mil"):
            results.append(_run_mil_task(task, store, cfg, data, cfg.out_dir))
        else:
            results.append(_run_tile_task(task, store, cfg, data))
    throughput = []
    if cfg.bench:
        for head in cfg.bench_heads:
            for p in cfg.bench_patch_sizes:
                throughput.append(throughput_bench(backbone, head, p, cfg.bench_duration, cfg.bench_batch_size,
                                                   seed=cfg.seed))
    report = SuiteReport(cfg.out_dir, results, throughput)
    write_metrics_csv(report.metric_rows(), os.path.join(cfg.out_dir, "metrics.csv"))
    write_throughput_csv(throughput, os.path.join(cfg.out_dir, "throughput.csv"))
    with open(os.path.join(cfg.out_dir, "summary.txt"), "w") as fh:
        fh.write(summary_text(report, cfg.checkpoint))
    with open(os.path.join(cfg.out_dir, "suite.json"), "w") as fh:
        json.dump(asdict(cfg), fh, indent=2)
    return report
