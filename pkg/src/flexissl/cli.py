"""Command-line entry point: ``flexissl <subcommand> ...``.

Subcommands: synth-data, pretrain, probe, mil, bench, report. Every subcommand
accepts ``--seed`` and writes its results as CSV plus a plain-text ``summary.txt``
into ``--out``. The exit status is 0 only when every requested stage succeeded.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import yaml

from .errors import (CheckpointError, InvalidArgumentError, NumericError, SamplingError, UndefinedMetricError)

logger = logging.getLogger("flexissl")

EXPECTED_ERRORS = (InvalidArgumentError, CheckpointError, NumericError, SamplingError, UndefinedMetricError,
                   FileNotFoundError)


def _write_summary(out_dir: str, lines) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "summary.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


# -- synth-data -----------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from . import pyramid as pyr

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i in range(args.n):
        cls = args.classes[i % len(args.classes)]
        p = pyr.build_synthetic_pyramid(pyr.derive_seed(args.seed, i), args.base_size, cls)
        name = f"pyramid_{i:05d}"
        pyr.save_pyramid(p, os.path.join(args.out, name))
        masks = pyr.compute_tissue_masks(p)
        rows.append((name, cls, p.texture_label, p.base_size, f"{masks[0].foreground_fraction:.4f}"))
    with open(os.path.join(args.out, "pyramids.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("name", "texture", "label", "base_size", "foreground_fraction"))
        w.writerows(rows)
    lines = [f"wrote {args.n} pyramids (base {args.base_size}px, classes {','.join(args.classes)}) to {args.out}"]
    if args.shard_tiles:
        from .data import PyramidDirSource

        src = PyramidDirSource(args.out, tuple(args.resolution_probs), args.tile_size, args.shard_tiles, args.seed,
                               cache=False)
        tiles = [src.tile(i) for i in range(len(src))]
        shard = pyr.write_tile_shard(tiles, os.path.join(args.out, "shard"))
        lines.append(f"wrote {len(tiles)} tiles of {args.tile_size}px to {shard}")
    _write_summary(args.out, lines)
    print("\n".join(lines))
    return 0


# -- pretrain -------------------------------------------------------------------------------


def _pretrain_config(args):
    from .config import PretrainConfig, desk_config, load_config

    base = desk_config() if args.preset == "desk" else PretrainConfig().validate()
    cfg = load_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def cmd_pretrain(args) -> int:
    from .config import default_config_text, dump_config

    if args.print_config:
        print(default_config_text() if not args.config and args.preset == "default"
              else dump_config(_pretrain_config(args)), end="")
        return 0
    if not args.out:
        raise InvalidArgumentError("--out is required unless --print-config is given")
    from .pretrain import pretrain

    cfg = _pretrain_config(args)
    state = pretrain(cfg, args.out, resume=args.resume, dump_loss_parts=args.dump_loss_parts,
                     max_steps=args.max_steps)
    with open(os.path.join(args.out, "config.yaml"), "w") as fh:
        fh.write(dump_config(cfg))
    last = state.history[-1] if state.history else {}
    lines = [f"steps: {state.step}/{state.total_steps}", f"checkpoint: {os.path.join(args.out, 'checkpoint.npz')}"]
    if last:
        lines.append(f"last total loss: {last['total']:.6f}")
    _write_summary(args.out, lines)
    print("\n".join(lines))
    return 0


# -- probe / mil / report -------------------------------------------------------------------


def _suite_from_args(args, tasks, bench):
    from .suite import SuiteConfig

    raw = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
    cfg = SuiteConfig(checkpoint=args.checkpoint, out_dir=args.out, **{k: v for k, v in raw.items()
                                                                       if k not in ("checkpoint", "out_dir")})
    if tasks is not None:
        cfg.tasks = tasks
    cfg.bench = bench if bench is not None else cfg.bench
    if args.seed is not None:
        cfg.seed = args.seed
    for name in ("n_train", "n_test", "n_bags_train", "n_bags_test", "bag_size", "fit_epochs", "n_bootstrap"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(cfg, name, value)
    return cfg.validate()


def _print_summary(out_dir: str) -> None:
    with open(os.path.join(out_dir, "summary.txt")) as fh:
        print(fh.read(), end="")


def cmd_probe(args) -> int:
    from .suite import run_benchmark_suite

    run_benchmark_suite(_suite_from_args(args, [args.head], False))
    _print_summary(args.out)
    return 0


def cmd_mil(args) -> int:
    from .suite import run_benchmark_suite

    run_benchmark_suite(_suite_from_args(args, ["mil" if args.mode == "frozen" else "mil-finetune"], False))
    _print_summary(args.out)
    return 0


def cmd_report(args) -> int:
    from .suite import run_benchmark_suite

    run_benchmark_suite(_suite_from_args(args, None, None if not args.no_bench else False))
    _print_summary(args.out)
    return 0


# -- bench --------------------------------------------------------------------------------------


def cmd_bench(args) -> int:
    from .bench import throughput_bench
    from .suite import write_throughput_csv

    reports = [throughput_bench(args.backbone, args.head, p, args.duration, args.batch_size, seed=args.seed or 0)
               for p in args.patch_sizes]
    os.makedirs(args.out, exist_ok=True)
    write_throughput_csv(reports, os.path.join(args.out, "throughput.csv"))
    lines = [f"{r.task} p={r.patch_size} tile={r.tile_size}: {r.tiles_per_second:.2f} tiles/s" for r in reports]
    lines.append(f"hardware: {reports[0].hardware}")
    _write_summary(args.out, lines)
    print("\n".join(lines))
    return 0


# -- parser -------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flexissl", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=None, help="global seed (default: config or 0)")
        p.set_defaults(func=func)
        return p

    p = add("synth-data", cmd_synth_data, "generate synthetic texture pyramids")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=16, help="number of pyramids")
    p.add_argument("--base-size", type=int, default=768)
    p.add_argument("--classes", nargs="+", default=["stripes", "dots"], choices=["stripes", "dots", "checker"])
    p.add_argument("--shard-tiles", type=int, default=0, help="also write this many tiles per pyramid as a shard")
    p.add_argument("--tile-size", type=int, default=256)
    p.add_argument("--resolution-probs", type=float, nargs=4, default=[0.25, 0.25, 0.25, 0.25])

    p = add("pretrain", cmd_pretrain, "self-supervised pre-training")
    p.add_argument("--config", help="YAML config; omitted keys keep the preset's values")
    p.add_argument("--preset", choices=["default", "desk"], default="default")
    p.add_argument("--out")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--print-config", action="store_true", help="print the effective config and exit")
    p.add_argument("--dump-loss-parts", action="store_true", help="write per-step loss terms to loss_parts.csv")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many steps in this run")

    def add_eval(p):
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config", help="YAML file with suite settings")
        p.add_argument("--n-train", dest="n_train", type=int)
        p.add_argument("--n-test", dest="n_test", type=int)
        p.add_argument("--fit-epochs", dest="fit_epochs", type=int)
        p.add_argument("--n-bootstrap", dest="n_bootstrap", type=int)

    p = add("probe", cmd_probe, "fit a tile-level head on frozen teacher features")
    p.add_argument("--head", choices=["linear", "attentive", "center-cell"], default="linear")
    add_eval(p)

    p = add("mil", cmd_mil, "fit an AdditiveMIL head on synthetic bags")
    p.add_argument("--mode", choices=["frozen", "finetune"], default="frozen")
    p.add_argument("--n-bags-train", dest="n_bags_train", type=int)
    p.add_argument("--n-bags-test", dest="n_bags_test", type=int)
    p.add_argument("--bag-size", dest="bag_size", type=int)
    add_eval(p)

    p = add("bench", cmd_bench, "tiles/second throughput")
    p.add_argument("--backbone", default="vit-s", help="preset name (vit-s, vit-b, desk, mini) or checkpoint path")
    p.add_argument("--head", choices=["tile", "mil"], default="tile")
    p.add_argument("--patch-sizes", type=int, nargs="+", default=[8, 16, 32])
    p.add_argument("--duration", type=float, default=5.0, help="timed seconds per patch size")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--out", required=True)

    p = add("report", cmd_report, "run every configured task plus throughput and write a report directory")
    add_eval(p)
    p.add_argument("--no-bench", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"flexissl {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
