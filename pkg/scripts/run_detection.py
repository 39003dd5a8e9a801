#!/usr/bin/env python3
"""Train the 5x benign-vs-malignant detector and report AUROC, AP and localization."""
import argparse

import numpy as np

from _common import dump, parse_counts
from mrmil import experiments, pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--counts", default="BN=100,LG=50,HG=50")
    ap.add_argument("--seed", type=int, default=0, help="dataset base seed")
    ap.add_argument("--out", default=None, help="optional JSON output path")
    args = ap.parse_args()

    source = experiments.build_source(parse_counts(args.counts), args.seed)
    cfg = pipeline.PipelineConfig(task="detect")
    run = experiments.run_detection(source, cfg)
    loc = experiments.localization(run, "test")
    dump({
        "auroc": run.report.auroc,
        "ap": run.report.ap,
        "train_seconds": round(run.train_seconds, 2),
        "total_seconds": round(run.total_seconds, 2),
        "n_malignant_test": len(loc),
        "median_mass_ratio": float(np.median([v["mass_ratio"] for v in loc.values()])) if loc else None,
        "median_top25_recall": float(np.median([v["top25_recall"] for v in loc.values()])) if loc else None,
    }, args.out)


if __name__ == "__main__":
    main()
