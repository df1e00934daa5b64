#!/usr/bin/env python3
"""Generate a small synthetic blur/sharp tree for desk-scale runs.

Layout matches the real datasets: <root>/<split>/<scene>/<pair>_{blur,sharp}.png.
"""

import argparse

from deblurkit.synthetic import make_dataset


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("root", help="output directory")
    parser.add_argument("--train", type=int, default=8)
    parser.add_argument("--val", type=int, default=2)
    parser.add_argument("--test", type=int, default=3)
    parser.add_argument("--size", type=int, default=48, help="image side in px")
    parser.add_argument("--scenes", type=int, default=2)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--blur-sigma", type=float, default=1.5)
    args = parser.parse_args()

    splits = {
        name: count
        for name, count in (("train", args.train), ("val", args.val), ("test", args.test))
        if count > 0
    }
    indices = make_dataset(
        args.root,
        splits,
        image_size=args.size,
        scenes=args.scenes,
        seed=args.seed,
        blur_sigma=args.blur_sigma,
    )
    for split, index in indices.items():
        print(f"{split}: {len(index)} pairs under {index.root / split}")


if __name__ == "__main__":
    main()
