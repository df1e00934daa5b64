#!/usr/bin/env python3
"""Print the efficiency study table: baseline grid plus the four entries.

Counts are analytic (meta-device shape trace), so the full-resolution numbers
take seconds on any machine.  Pass --runs N to add wall-clock timings.
"""

import argparse

import torch

from deblurkit import models
from deblurkit.efficiency import benchmark_runtime, check_gate, profile
from deblurkit.reparam import convert_model

GRID = [
    "nafnet-c16-l14",
    "nafnet-c16-l28",
    "nafnet-c24-l14",
    "nafnet-c32-l14",
    "nafnet-c32-l28",
]
SUBMISSIONS = ["nafreplocal", "restormerl", "sa-nafnet"]


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--res", default="1920x1200")
    parser.add_argument("--runs", type=int, default=0, help="runtime benchmark runs")
    parser.add_argument("--warmup", type=int, default=1)
    args = parser.parse_args()
    w, h = (int(p) for p in args.res.lower().split("x"))

    print(f"{'model':<18} {'params':>8} {'macs':>9} {'runtime':>11}  gate")
    for name in GRID + SUBMISSIONS:
        torch.manual_seed(0)
        model = models.build_model(models.PRESETS[name]).eval()
        model = convert_model(model)
        runtime = None
        if args.runs > 0:
            runtime = benchmark_runtime(model, h, w, runs=args.runs, warmup=args.warmup)
        report = profile(model, h, w, model_name=name, runtime=runtime)
        gate = check_gate(report) if {h, w} == {1200, 1920} else None
        print(report.summary_row(gate))


if __name__ == "__main__":
    main()
