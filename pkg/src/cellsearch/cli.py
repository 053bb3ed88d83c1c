"""Command-line entry point: search, derive, train, eval, ablate, export-dot.

Every command is driven by one JSON run config (plus ``--set`` overrides),
fans the master seed out into named sub-seeds, and finishes by writing a
manifest listing the resolved config and a hash of every emitted file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__, genotype as gt, metrics, optim
from .config import (ConfigError, ImageDirSpec, RunConfig, SyntheticSpec,
                     config_to_dict, fanout_seed, load_config)
from .data import (Dataset, DatasetError, SplitSpec, channel_stats, load_image_dir,
                   read_stats, split, synthetic_shapes, write_stats, batches)
from .genotype import GenotypeError
from .network import (FIXED, RELAXED, CheckpointError, SuperNet, load_checkpoint,
                      save_checkpoint)
from .search_space import AlphaParams
from .tensor import Tensor

KNOWN_ERRORS = (ConfigError, DatasetError, GenotypeError, CheckpointError,
                ValueError, OSError, RuntimeError)


# -- shared plumbing ---------------------------------------------------------


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: Path, command: str, cfg: RunConfig, files: list[Path],
                   wall_seconds: float) -> Path:
    payload = {
        "command": command,
        "seed": cfg.seed,
        "software_version": __version__,
        "wall_seconds": round(wall_seconds, 3),
        "config": config_to_dict(cfg),
        "files": {str(p.relative_to(out_dir)): _sha256(p) for p in sorted(files)},
    }
    path = out_dir / "manifest.json"
    tmp = out_dir / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        fh.write(json.dumps(payload, indent=2) + "\n")
    os.replace(tmp, path)
    return path


def build_dataset(cfg: RunConfig) -> Dataset:
    src = cfg.data.source
    if isinstance(src, SyntheticSpec):
        size = src.size or cfg.network.input_size
        if size != cfg.network.input_size:
            raise ConfigError(
                f"data.source.size ({size}) must match network.input_size "
                f"({cfg.network.input_size})"
            )
        ds = synthetic_shapes(src.num_classes, src.per_class, size,
                              seed=cfg.sub_seed("synthetic"))
    elif isinstance(src, ImageDirSpec):
        ds = load_image_dir(src.root, image_size=cfg.network.input_size)
    else:
        raise ConfigError(f"unsupported data source {src!r}")
    if ds.num_classes != cfg.network.num_classes:
        raise ConfigError(
            f"dataset has {ds.num_classes} classes but network.num_classes is "
            f"{cfg.network.num_classes}"
        )
    return ds


def _split(cfg: RunConfig, dataset: Dataset, kind: Optional[str] = None):
    spec = SplitSpec(kind=kind or cfg.data.split.kind, ratio=cfg.data.split.ratio,
                     seed=cfg.sub_seed("split"))
    return split(dataset, spec)


def evaluate_confusion(net: SuperNet, dataset: Dataset, batch_size: int,
                       stats) -> metrics.ConfusionMatrix:
    net.eval()
    cm = metrics.ConfusionMatrix(dataset.class_names)
    for images, labels in batches(dataset, batch_size, shuffle_seed=None, epoch=0,
                                  stats=stats, dtype=net.dtype):
        logits = net.forward(Tensor(images))
        cm.accumulate(labels, logits.data.argmax(axis=1))
    return cm


def write_curves_svg(records, path: Path) -> None:
    """Static line chart of train/validation accuracy per epoch."""
    width, height, margin = 640, 400, 45
    n = max(len(records), 2)

    def x_at(i):
        return margin + i * (width - 2 * margin) / (n - 1)

    def y_at(acc):
        return height - margin - acc * (height - 2 * margin)

    def polyline(values, color):
        points = " ".join(f"{x_at(i):.1f},{y_at(v):.1f}" for i, v in enumerate(values))
        return (f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                f'points="{points}"/>')

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" '
        f'stroke="black"/>',
        polyline([r.train_acc for r in records], "#1f77b4"),
        polyline([r.val_acc for r in records], "#d62728"),
        f'<text x="{width - margin - 130}" y="{margin}" fill="#1f77b4">train accuracy</text>',
        f'<text x="{width - margin - 130}" y="{margin + 16}" fill="#d62728">valid accuracy</text>',
        f'<text x="{width // 2 - 20}" y="{height - 10}">epoch</text>',
        "</svg>",
    ]
    path.write_text("\n".join(parts) + "\n")


# -- pipelines ---------------------------------------------------------------


def run_search(cfg: RunConfig, out_dir: Path, svg: bool = False) -> dict:
    """Relaxed-network search; writes best coefficients, the derived genotype,
    per-epoch coefficient snapshots, and accuracy curves."""
    if cfg.data.split.kind != "search_half":
        raise ConfigError("search requires data.split.kind == 'search_half'")
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    train_half, val_half = _split(cfg, dataset)

    mean, std = channel_stats(train_half)
    stats_path = out_dir / "norm_stats.json"
    write_stats(stats_path, mean, std)

    net = SuperNet(cfg.network, mode=RELAXED,
                   rng=np.random.default_rng(cfg.sub_seed("init")), dtype=cfg.dtype)
    alphas = AlphaParams(np.random.default_rng(cfg.sub_seed("alpha")), dtype=cfg.dtype,
                         mask=cfg.network.operator_mask)

    # curves and coefficient snapshots stream out as epochs finish
    files = [stats_path]
    epoch_dir = out_dir / "alphas"
    epoch_dir.mkdir(exist_ok=True)
    curves_path = out_dir / "curves.csv"
    with open(curves_path, "w") as curves:
        curves.write(optim.CURVES_HEADER + "\n")

        def on_epoch(record, snap):
            curves.write(metrics.curve_row(record) + "\n")
            curves.flush()
            p = epoch_dir / f"epoch_{record.epoch:03d}.alphas.json"
            gt.write_alphas(_snapshot(snap, cfg, alphas), p)
            files.append(p)

        result = optim.search(net, alphas, train_half, val_half, cfg.search, cfg.arch,
                              shuffle_seed=cfg.sub_seed("shuffle"), stats=(mean, std),
                              on_epoch=on_epoch)

    best = _snapshot(result.best_alphas, cfg, alphas)
    best_alphas_path = out_dir / "best.alphas.json"
    gt.write_alphas(best, best_alphas_path)
    genotype = gt.derive(best)
    genotype_path = out_dir / "best.genotype.json"
    gt.write_genotype(genotype, genotype_path)
    files += [best_alphas_path, genotype_path, curves_path]
    if svg:
        svg_path = out_dir / "curves.svg"
        write_curves_svg(result.records, svg_path)
        files.append(svg_path)
    return {"files": files, "result": result, "genotype_path": genotype_path,
            "genotype": genotype}


def _snapshot(snap: dict, cfg: RunConfig, alphas: AlphaParams) -> gt.AlphaSnapshot:
    return gt.AlphaSnapshot(normal=snap["normal"].astype(np.float64),
                            reduce=snap["reduce"].astype(np.float64),
                            mask=alphas.mask, seed=cfg.seed)


def run_train(cfg: RunConfig, genotype: gt.Genotype, out_dir: Path,
              svg: bool = False) -> dict:
    """Train the fixed network num_runs times with fanned-out seeds; evaluate
    each run on the held-out part and summarize."""
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    train_part, held_out = _split(cfg, dataset)

    mean, std = channel_stats(train_part)
    stats_path = out_dir / "norm_stats.json"
    write_stats(stats_path, mean, std)

    files = [stats_path]
    accuracies = []
    for run in range(cfg.num_runs):
        run_seed = cfg.sub_seed(f"run{run}")
        suffix = "" if cfg.num_runs == 1 else f"_run{run}"
        net = SuperNet(cfg.network, mode=FIXED, genotype=genotype,
                       rng=np.random.default_rng(fanout_seed(run_seed, "init")),
                       dtype=cfg.dtype)
        curves_path = out_dir / f"curves{suffix}.csv"
        with open(curves_path, "w") as curves:
            curves.write(optim.CURVES_HEADER + "\n")

            def on_epoch(record):
                curves.write(metrics.curve_row(record) + "\n")
                curves.flush()

            records = optim.train_fixed(
                net, train_part, cfg.train,
                shuffle_seed=fanout_seed(run_seed, "shuffle"),
                val_set=held_out, stats=(mean, std), augment=cfg.data.augment,
                augment_seed=fanout_seed(run_seed, "augment"), on_epoch=on_epoch)
        ckpt_path = out_dir / f"checkpoint{suffix}.ckpt"
        save_checkpoint(net, ckpt_path)
        cm = evaluate_confusion(net, held_out, cfg.train.batch_size, (mean, std))
        cm_path = out_dir / f"cm{suffix}.csv"
        metrics.write_cm_csv(cm, cm_path)
        accuracies.append(metrics.overall_accuracy(cm))
        files += [ckpt_path, curves_path, cm_path]
        if svg:
            svg_path = out_dir / f"curves{suffix}.svg"
            write_curves_svg(records, svg_path)
            files.append(svg_path)

    summary = metrics.summarize(accuracies)
    report_path = out_dir / "oa_report.json"
    _write_oa_report(report_path, summary)
    files.append(report_path)
    return {"files": files, "summary": summary}


def _write_oa_report(path: Path, summary: metrics.RunSummary) -> None:
    payload = {
        "oa_per_run": summary.accuracies,
        "oa_mean": summary.mean,
        "oa_std": summary.std,
        "num_runs": len(summary.accuracies),
    }
    path.write_text(json.dumps(payload, indent=2) + "\n")


def run_eval(cfg: RunConfig, genotype: gt.Genotype, checkpoint: Path, out_dir: Path,
             stats_path: Optional[Path] = None) -> dict:
    """Restore a trained fixed network and score the held-out split."""
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = build_dataset(cfg)
    train_part, held_out = _split(cfg, dataset)
    if stats_path is None:
        candidate = checkpoint.parent / "norm_stats.json"
        stats_path = candidate if candidate.exists() else None
    if stats_path is not None:
        mean, std = read_stats(stats_path)
    else:
        mean, std = channel_stats(train_part)
    net = SuperNet(cfg.network, mode=FIXED, genotype=genotype,
                   rng=np.random.default_rng(0), dtype=cfg.dtype)
    load_checkpoint(net, checkpoint)
    cm = evaluate_confusion(net, held_out, cfg.train.batch_size, (mean, std))
    cm_path = out_dir / "cm.csv"
    metrics.write_cm_csv(cm, cm_path)
    oa = metrics.overall_accuracy(cm)
    report_path = out_dir / "oa_report.json"
    _write_oa_report(report_path, metrics.summarize([oa]))
    return {"files": [cm_path, report_path], "oa": oa, "cm": cm}


# -- commands ----------------------------------------------------------------


def _add_config_args(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="path to a JSON run config")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one config value")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out-dir", default=None)
    parser.add_argument("--precision", choices=["f32", "f64"], default=None)
    parser.add_argument("--num-runs", type=int, default=None)
    parser.add_argument("--exclude-atrous", action="store_true",
                        help="drop both dilated convolutions from the operator set")


def _config_from_args(args) -> RunConfig:
    return load_config(args.config, args.overrides, seed=args.seed,
                       out_dir=args.out_dir, precision=args.precision,
                       num_runs=args.num_runs, exclude_atrous=args.exclude_atrous)


def cmd_search(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.out_dir)
    start = time.perf_counter()
    outcome = run_search(cfg, out_dir, svg=args.svg)
    write_manifest(out_dir, "search", cfg, outcome["files"], time.perf_counter() - start)
    result = outcome["result"]
    print(f"search: best validation accuracy {result.best_val_acc:.4f} "
          f"at epoch {result.best_epoch}")
    print(f"search: wrote {outcome['genotype_path']}")
    return 0


def cmd_derive(args) -> int:
    snapshot = gt.read_alphas(args.alphas)
    genotype = gt.derive(snapshot)
    out = Path(args.out) if args.out else _swap_suffix(Path(args.alphas), ".alphas.json",
                                                       ".genotype.json")
    gt.write_genotype(genotype, out)
    print(f"derive: wrote {out}")
    return 0


def cmd_export_dot(args) -> int:
    genotype = gt.read_genotype(args.genotype)
    out = Path(args.out) if args.out else _swap_suffix(Path(args.genotype),
                                                       ".genotype.json", ".dot")
    out.write_text(gt.export_dot(genotype))
    print(f"export-dot: wrote {out}")
    return 0


def _swap_suffix(path: Path, old: str, new: str) -> Path:
    name = path.name
    if name.endswith(old):
        return path.with_name(name[: -len(old)] + new)
    return path.with_name(name + new)


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    genotype = gt.read_genotype(args.genotype)
    out_dir = Path(cfg.out_dir)
    start = time.perf_counter()
    outcome = run_train(cfg, genotype, out_dir, svg=args.svg)
    write_manifest(out_dir, "train", cfg, outcome["files"], time.perf_counter() - start)
    s = outcome["summary"]
    print(f"train: overall accuracy {s.mean:.4f} +/- {s.std:.4f} "
          f"over {len(s.accuracies)} run(s)")
    return 0


def cmd_eval(args) -> int:
    cfg = _config_from_args(args)
    genotype = gt.read_genotype(args.genotype)
    out_dir = Path(cfg.out_dir)
    start = time.perf_counter()
    outcome = run_eval(cfg, genotype, Path(args.checkpoint), out_dir,
                       stats_path=Path(args.stats) if args.stats else None)
    write_manifest(out_dir, "eval", cfg, outcome["files"], time.perf_counter() - start)
    print(f"eval: overall accuracy {outcome['oa']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    out_dir = Path(cfg.out_dir)
    start = time.perf_counter()
    files = []
    if args.mode == "replace":
        if not args.genotype:
            raise ConfigError("ablate replace requires --genotype")
        original = gt.read_genotype(args.genotype)
        ablated = gt.ablate_replace_atrous(original)
        out_dir.mkdir(parents=True, exist_ok=True)
        ablated_path = out_dir / "ablated.genotype.json"
        gt.write_genotype(ablated, ablated_path)
        files.append(ablated_path)
        train_out = run_train(cfg, ablated, out_dir / "train", svg=args.svg)
        files += train_out["files"]
        summary = train_out["summary"]
    else:  # exclude
        if args.genotype:
            raise ConfigError("ablate exclude searches from scratch; drop --genotype")
        cfg.network.operator_mask = gt.atrous_free_mask()
        search_out = run_search(cfg, out_dir / "search", svg=args.svg)
        files += search_out["files"]
        train_out = run_train(cfg, search_out["genotype"], out_dir / "train",
                              svg=args.svg)
        files += train_out["files"]
        summary = train_out["summary"]
    write_manifest(out_dir, f"ablate-{args.mode}", cfg, files,
                   time.perf_counter() - start)
    print(f"ablate {args.mode}: overall accuracy {summary.mean:.4f} "
          f"+/- {summary.std:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cellsearch",
        description="Learn a convolutional cell from data, then build, train, "
                    "and evaluate the resulting classifier.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="run the bi-level architecture search")
    _add_config_args(p)
    p.add_argument("--svg", action="store_true", help="also render curves.svg")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("derive", help="discretize a coefficients file into a genotype")
    p.add_argument("--alphas", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_derive)

    p = sub.add_parser("export-dot", help="render a genotype as DOT graphs")
    p.add_argument("--genotype", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_dot)

    p = sub.add_parser("train", help="train a fixed network from a genotype")
    _add_config_args(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the held-out split")
    _add_config_args(p)
    p.add_argument("--genotype", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats", help="normalization stats file "
                                   "(default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="atrous-removal experiments")
    _add_config_args(p)
    p.add_argument("--mode", choices=["replace", "exclude"], required=True)
    p.add_argument("--genotype")
    p.add_argument("--svg", action="store_true")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
