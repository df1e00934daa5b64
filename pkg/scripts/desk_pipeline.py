#!/usr/bin/env python3
"""End-to-end desk demo: synthesize data, train the 4-stage desk plan on the
tiny model, restore the validation split with flip TTA, score it, and package
a submission archive.  Runs in a few minutes on CPU.
"""

import argparse
import sys
from importlib import resources
from pathlib import Path

from deblurkit.cli import main as cli
from deblurkit.synthetic import make_dataset


def run(args: list[str]) -> None:
    print("+ deblurkit " + " ".join(args))
    code = cli(args)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("workdir", help="scratch directory for the demo")
    parser.add_argument("--seed", type=int, default=7)
    args = parser.parse_args()

    work = Path(args.workdir)
    data = work / "data"
    make_dataset(data, {"train": 8, "val": 2}, image_size=48, seed=args.seed)
    print(f"synthetic dataset under {data}")

    pkg = resources.files("deblurkit")
    plan = work / "plan.yaml"
    plan.write_text((pkg / "plans" / "nafreplocal_desk.yaml").read_text())
    model_cfg = work / "model.yaml"
    model_cfg.write_text((pkg / "configs" / "nafreplocal_desk.yaml").read_text())

    run_dir = work / "run"
    run(
        [
            "train", str(plan),
            "--model", str(model_cfg),
            "--data", str(data),
            "--out", str(run_dir),
            "--seed", str(args.seed),
        ]
    )
    preds = work / "preds"
    run(
        [
            "eval", str(run_dir / "best.pt"),
            "--data", str(data),
            "--split", "val",
            "--out", str(preds),
            "--tta", "flips",
            "--ema",
        ]
    )
    run(
        [
            "score", str(preds),
            "--gt", str(data),
            "--split", "val",
            "--out", str(work / "score"),
        ]
    )
    run(
        [
            "package", str(run_dir / "best.pt"), str(preds),
            "--out", str(work / "submission.tar.gz"),
            "--field", "method=desk-demo",
        ]
    )
    print("demo complete:", work / "submission.tar.gz")


if __name__ == "__main__":
    main()
