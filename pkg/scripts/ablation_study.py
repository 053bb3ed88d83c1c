#!/usr/bin/env python3
"""Atrous-convolution ablation study at desk scale.

Trains three variants and prints a side-by-side accuracy table:
  baseline   the searched genotype as-is
  replace    atrous convolutions swapped for equal-size separable ones
  exclude    a fresh search with atrous operators removed from the space
"""

import argparse
import json
import sys
from pathlib import Path

from cellsearch.cli import main as cellsearch_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/ablation")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--per-class", type=int, default=64)
    parser.add_argument("--cells", type=int, default=4)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--image-size", type=int, default=16)
    parser.add_argument("--search-epochs", type=int, default=5)
    parser.add_argument("--train-epochs", type=int, default=20)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--num-runs", type=int, default=3)
    args = parser.parse_args(argv)

    out = Path(args.out_dir)
    shared = [
        "--seed", str(args.seed),
        "--num-runs", str(args.num_runs),
        "--set", f"network.num_cells={args.cells}",
        "--set", f"network.init_channels={args.channels}",
        "--set", f"network.num_classes={args.classes}",
        "--set", f"network.input_size={args.image_size}",
        "--set", json.dumps({"kind": "synthetic", "num_classes": args.classes,
                             "per_class": args.per_class}).join(["data.source=", ""]),
        "--set", f"search.epochs={args.search_epochs}",
        "--set", f"search.batch_size={args.batch_size}",
        "--set", f"train.epochs={args.train_epochs}",
        "--set", f"train.batch_size={args.batch_size}",
    ]

    if cellsearch_main(["search", "--out-dir", str(out / "search"), *shared]) != 0:
        return 1
    genotype = out / "search" / "best.genotype.json"

    if cellsearch_main(["train", "--genotype", str(genotype),
                        "--out-dir", str(out / "baseline"), *shared]) != 0:
        return 1
    if cellsearch_main(["ablate", "--mode", "replace", "--genotype", str(genotype),
                        "--out-dir", str(out / "replace"), *shared]) != 0:
        return 1
    if cellsearch_main(["ablate", "--mode", "exclude",
                        "--out-dir", str(out / "exclude"), *shared]) != 0:
        return 1

    rows = [
        ("baseline", out / "baseline" / "oa_report.json"),
        ("replace-atrous", out / "replace" / "train" / "oa_report.json"),
        ("exclude-atrous", out / "exclude" / "train" / "oa_report.json"),
    ]
    print()
    print(f"{'variant':<16} {'OA mean':>8} {'OA std':>8} runs")
    for name, path in rows:
        report = json.loads(path.read_text())
        print(f"{name:<16} {report['oa_mean']:>8.4f} {report['oa_std']:>8.4f} "
              f"{report['num_runs']}")
    return 0


if __name__ == "__main__":
    sys.exit(run())
