#!/usr/bin/env python3
"""Desk-scale experiment: learn a cell on synthetic imagery, then train and
score the discretized network.

Runs the whole pipeline (search -> derive -> train -> eval report) in a few
CPU-minutes. Artifacts land under --out-dir/{search,train}.
"""

import argparse
import json
import sys
from pathlib import Path

from cellsearch.cli import main as cellsearch_main


def run(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out-dir", default="runs/desk")
    parser.add_argument("--seed", type=int, default=11)
    parser.add_argument("--classes", type=int, default=4)
    parser.add_argument("--per-class", type=int, default=256)
    parser.add_argument("--cells", type=int, default=4)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--image-size", type=int, default=16)
    parser.add_argument("--search-epochs", type=int, default=5)
    parser.add_argument("--train-epochs", type=int, default=30)
    parser.add_argument("--batch-size", type=int, default=16)
    parser.add_argument("--exclude-atrous", action="store_true")
    args = parser.parse_args(argv)

    out = Path(args.out_dir)
    shared = [
        "--seed", str(args.seed), "--num-runs", "1",
        "--set", f"network.num_cells={args.cells}",
        "--set", f"network.init_channels={args.channels}",
        "--set", f"network.num_classes={args.classes}",
        "--set", f"network.input_size={args.image_size}",
        "--set", json.dumps({"kind": "synthetic", "num_classes": args.classes,
                             "per_class": args.per_class}).join(["data.source=", ""]),
    ]
    if args.exclude_atrous:
        shared.append("--exclude-atrous")

    code = cellsearch_main([
        "search", "--out-dir", str(out / "search"), *shared,
        "--set", f"search.epochs={args.search_epochs}",
        "--set", f"search.batch_size={args.batch_size}",
        "--svg",
    ])
    if code != 0:
        return code

    code = cellsearch_main([
        "train", "--genotype", str(out / "search" / "best.genotype.json"),
        "--out-dir", str(out / "train"), *shared,
        "--set", f"train.epochs={args.train_epochs}",
        "--set", f"train.batch_size={args.batch_size}",
        "--svg",
    ])
    if code != 0:
        return code

    report = json.loads((out / "train" / "oa_report.json").read_text())
    print(f"desk pipeline done: overall accuracy {report['oa_mean']:.4f} "
          f"(artifacts in {out})")
    return 0


if __name__ == "__main__":
    sys.exit(run())
