"""Synthetic blur/sharp fixture trees for desk-scale runs and tests.

Sharp images are smoothed random textures; blurred counterparts are Gaussian
blurs of the sharp image, so a restoration model has real signal to learn at
toy sizes.
"""

from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .data_io import BLUR_SUFFIX, SHARP_SUFFIX, DatasetIndex, build_index, quantize_u8


def make_pair(rng: np.random.Generator, size: int, blur_sigma: float = 1.5):
    sharp = cv2.GaussianBlur(
        rng.random((size, size, 3)).astype(np.float32), (0, 0), 1.0
    )
    lo, hi = float(sharp.min()), float(sharp.max())
    sharp = (sharp - lo) / max(hi - lo, 1e-6)
    blur = cv2.GaussianBlur(sharp, (0, 0), blur_sigma)
    return np.clip(blur, 0.0, 1.0), np.clip(sharp, 0.0, 1.0)


def make_dataset(
    root: str | Path,
    split_sizes: dict[str, int],
    image_size: int = 48,
    scenes: int = 2,
    seed: int = 0,
    blur_sigma: float = 1.5,
    sharp_equals_blur: bool = False,
) -> dict[str, DatasetIndex]:
    """Write a synthetic paired tree and return its per-split indices.

    With ``sharp_equals_blur`` the ground truth file duplicates the blurred
    one, which makes identity restoration exactly perfect (handy for
    pipeline round-trip checks).
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    indices: dict[str, DatasetIndex] = {}
    for split, count in split_sizes.items():
        for i in range(count):
            blur, sharp = make_pair(rng, image_size, blur_sigma)
            if sharp_equals_blur:
                sharp = blur
            scene_dir = root / split / f"scene{i % scenes}"
            scene_dir.mkdir(parents=True, exist_ok=True)
            pair_id = f"{split}{i:03d}"
            cv2.imwrite(
                str(scene_dir / (pair_id + BLUR_SUFFIX)),
                cv2.cvtColor(quantize_u8(blur), cv2.COLOR_RGB2BGR),
            )
            cv2.imwrite(
                str(scene_dir / (pair_id + SHARP_SUFFIX)),
                cv2.cvtColor(quantize_u8(sharp), cv2.COLOR_RGB2BGR),
            )
        indices[split] = build_index(root, split)
    return indices
