#!/usr/bin/env python3
"""Two-stage 5x -> 10x grading against a single-stage 5x baseline."""
import argparse

from _common import dump, parse_counts
from mrmil import experiments, pipeline


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--counts", default="BN=100,LG=100,HG=100")
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--method", default=None, choices=["att_cluster", "att_top_q", "blue_ratio"])
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    source = experiments.build_source(parse_counts(args.counts), args.seed)
    run = experiments.run_two_stage(source, pipeline.PipelineConfig(task="grade3"), args.method)
    dump({
        "method": args.method or "att_cluster",
        "kappa_two_stage": run.kappa_two_stage,
        "kappa_single_stage": run.kappa_single_stage,
        "gain": run.kappa_two_stage - run.kappa_single_stage,
        "seconds": round(run.seconds, 1),
    }, args.out)


if __name__ == "__main__":
    main()
