#!/usr/bin/env python3
"""Top-25% recall of truth-positive tiles with and without instance dropout."""
import argparse
import dataclasses

import numpy as np

from _common import dump, parse_counts
from mrmil import experiments, pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--counts", default="BN=100,LG=50,HG=50")
    ap.add_argument("--seed", type=int, default=0, help="dataset base seed")
    ap.add_argument("--train-seeds", default="0,1,2")
    ap.add_argument("--p", type=float, default=0.5, help="dropout probability for the 'with' arm")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    source = experiments.build_source(parse_counts(args.counts), args.seed)
    cfg = pipeline.PipelineConfig(task="detect")
    store, grids = pipeline.featurize_detection(source, cfg)
    result = {"per_seed": {}}
    pooled = {"with": [], "without": []}
    for seed in (int(s) for s in args.train_seeds.split(",")):
        row = {}
        for arm, p in (("with", args.p), ("without", 0.0)):
            tc = dataclasses.replace(cfg.train, instance_dropout_p=p, seed=seed)
            run = experiments.run_detection(source, cfg, store, grids, tc)
            loc = experiments.localization(run, "test")
            rec = [v["top25_recall"] for v in loc.values()]
            pooled[arm].extend(rec)
            row[arm] = {"median_recall": float(np.median(rec)),
                        "median_mass_ratio": float(np.median([v["mass_ratio"] for v in loc.values()]))}
        result["per_seed"][str(seed)] = row
    result["pooled_median_recall"] = {k: float(np.median(v)) for k, v in pooled.items()}
    dump(result, args.out)


if __name__ == "__main__":
    main()
