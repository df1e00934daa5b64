"""Paired blur/sharp dataset ingestion, augmentation, and result output.

Directory layout: ``<root>/<split>/<scene_id>/<pair_id>_{blur,sharp}.png``.
A split may instead carry a ``manifest.tsv`` (``pair_id<TAB>blur<TAB>sharp``
relative to the root, sharp column optional) which overrides discovery.

Images travel through the toolkit as HxWx3 float32 arrays in [0, 1]; files
are 8-bit RGB PNG with round-half-up quantization on write, so a write/read
round trip is exact to within half a quantization step per channel.

Indices and pairs are frozen after construction, and entries are independent
of each other, so any number of readers may iterate an index concurrently
and patch extraction parallelizes over entries.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.tsv"
BLUR_SUFFIX = "_blur.png"
SHARP_SUFFIX = "_sharp.png"


class DatasetError(RuntimeError):
    pass


class ClampAudit:
    """Counts values pushed back into range so clamping is never silent."""

    def __init__(self) -> None:
        self.calls = 0
        self.clamped_values = 0

    def add(self, clamped: int) -> None:
        self.calls += 1
        self.clamped_values += int(clamped)

    def reset(self) -> None:
        self.calls = 0
        self.clamped_values = 0


WRITE_AUDIT = ClampAudit()


@dataclass(frozen=True)
class ImagePair:
    pair_id: str
    blur: np.ndarray
    sharp: np.ndarray
    scene_id: str = ""

    def __post_init__(self) -> None:
        if self.blur.shape != self.sharp.shape:
            raise DatasetError(
                f"pair {self.pair_id}: blur {self.blur.shape} != sharp "
                f"{self.sharp.shape}"
            )


@dataclass(frozen=True)
class IndexEntry:
    pair_id: str
    blur_path: Path
    sharp_path: Path | None

    @property
    def scene_id(self) -> str:
        return self.blur_path.parent.name


@dataclass(frozen=True)
class DatasetIndex:
    root: Path
    split: str
    entries: tuple[IndexEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)


def load_image(path: str | Path) -> np.ndarray:
    """Decode an 8-bit RGB image into float32 [0, 1]."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def quantize_u8(image: np.ndarray) -> np.ndarray:
    """Round-half-up quantization of [0, 1] floats to bytes."""
    return np.floor(image * 255.0 + 0.5).astype(np.uint8)


def load_pair(entry: IndexEntry) -> ImagePair:
    if entry.sharp_path is None:
        raise DatasetError(f"pair {entry.pair_id} has no ground truth")
    return ImagePair(
        pair_id=entry.pair_id,
        blur=load_image(entry.blur_path),
        sharp=load_image(entry.sharp_path),
        scene_id=entry.scene_id,
    )


def _entries_from_manifest(root: Path, manifest: Path) -> list[IndexEntry]:
    entries = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise DatasetError(f"{manifest}:{lineno}: expected 2 or 3 tab fields")
        pair_id, blur_rel = parts[0], parts[1]
        sharp_rel = parts[2] if len(parts) == 3 and parts[2] else None
        entries.append(
            IndexEntry(
                pair_id=pair_id,
                blur_path=root / blur_rel,
                sharp_path=root / sharp_rel if sharp_rel else None,
            )
        )
    return entries


def _entries_from_tree(split_dir: Path) -> list[IndexEntry]:
    entries = []
    for blur_path in split_dir.rglob(f"*{BLUR_SUFFIX}"):
        pair_id = blur_path.name[: -len(BLUR_SUFFIX)]
        sharp_path = blur_path.with_name(pair_id + SHARP_SUFFIX)
        entries.append(
            IndexEntry(
                pair_id=pair_id,
                blur_path=blur_path,
                sharp_path=sharp_path if sharp_path.exists() else None,
            )
        )
    return entries


def build_index(root: str | Path, split: str) -> DatasetIndex:
    """Deterministic index of one split, sorted by pair id.

    In the train and val splits every blur image must have its sharp mate;
    the test split may be ground-truth-free.
    """
    root = Path(root)
    if split not in SPLITS:
        raise DatasetError(f"unknown split {split!r}; expected one of {SPLITS}")
    split_dir = root / split
    if not split_dir.is_dir():
        raise DatasetError(f"missing dataset directory {split_dir}")

    manifest = split_dir / MANIFEST_NAME
    if manifest.exists():
        entries = _entries_from_manifest(root, manifest)
    else:
        entries = _entries_from_tree(split_dir)

    if not entries:
        raise DatasetError(f"no image pairs found under {split_dir}")

    seen: set[str] = set()
    for entry in entries:
        if entry.pair_id in seen:
            raise DatasetError(f"duplicate pair_id {entry.pair_id!r}")
        seen.add(entry.pair_id)
        if not entry.blur_path.exists():
            raise DatasetError(f"pair {entry.pair_id}: missing {entry.blur_path}")
        if split != "test" and entry.sharp_path is None:
            raise DatasetError(
                f"pair {entry.pair_id}: sharp image missing in {split} split"
            )

    entries.sort(key=lambda e: e.pair_id)
    return DatasetIndex(root=root, split=split, entries=tuple(entries))


def random_crop_pair(pair: ImagePair, size: int, rng_seed: int) -> ImagePair:
    """Crop the same random size x size window from blur and sharp."""
    h, w = pair.blur.shape[:2]
    if size > min(h, w):
        raise DatasetError(
            f"crop {size} exceeds image {h}x{w} for pair {pair.pair_id}"
        )
    rng = np.random.default_rng(rng_seed)
    y = int(rng.integers(0, h - size + 1))
    x = int(rng.integers(0, w - size + 1))
    return ImagePair(
        pair_id=pair.pair_id,
        blur=pair.blur[y : y + size, x : x + size].copy(),
        sharp=pair.sharp[y : y + size, x : x + size].copy(),
        scene_id=pair.scene_id,
    )


def flip_augment(pair: ImagePair, horizontal: bool, vertical: bool) -> ImagePair:
    """Apply the same flips to both images; flips are involutions."""

    def flip(img: np.ndarray) -> np.ndarray:
        if horizontal:
            img = img[:, ::-1]
        if vertical:
            img = img[::-1, :]
        return np.ascontiguousarray(img)

    return ImagePair(
        pair_id=pair.pair_id,
        blur=flip(pair.blur),
        sharp=flip(pair.sharp),
        scene_id=pair.scene_id,
    )


def _patch_origins(extent: int, size: int, stride: int) -> list[int]:
    return list(range(0, extent - size + 1, stride))


def precrop_patches(
    index: DatasetIndex,
    sizes: list[int],
    out_root: str | Path,
    stride_policy: str = "tiled",
) -> DatasetIndex:
    """Cut every pair into fixed-size patches and write a patch dataset.

    ``tiled`` uses non-overlapping windows, ``overlap`` a 50% stride.  Pairs
    smaller than a requested size are skipped (padding would fabricate
    content); the skip count is logged.
    """
    if stride_policy not in ("tiled", "overlap"):
        raise DatasetError(f"unknown stride_policy {stride_policy!r}")
    out_root = Path(out_root)
    try:
        out_root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create {out_root}: {exc}") from exc

    skipped = 0
    for entry in index:
        pair = load_pair(entry)
        h, w = pair.blur.shape[:2]
        scene_dir = out_root / index.split / pair.scene_id
        scene_dir.mkdir(parents=True, exist_ok=True)
        for size in sizes:
            if size > min(h, w):
                skipped += 1
                continue
            stride = size if stride_policy == "tiled" else max(1, size // 2)
            for y in _patch_origins(h, size, stride):
                for x in _patch_origins(w, size, stride):
                    patch_id = f"{pair.pair_id}_p{size}_y{y}_x{x}"
                    blur = pair.blur[y : y + size, x : x + size]
                    sharp = pair.sharp[y : y + size, x : x + size]
                    _save_png(blur, scene_dir / (patch_id + BLUR_SUFFIX))
                    _save_png(sharp, scene_dir / (patch_id + SHARP_SUFFIX))
    if skipped:
        logger.warning("precrop_patches skipped %d undersized pair/size combos", skipped)
    return build_index(out_root, index.split)


def _save_png(image: np.ndarray, path: Path) -> None:
    Image.fromarray(quantize_u8(image)).save(path, format="PNG")


def write_result(
    image: np.ndarray,
    pair_id: str,
    out_root: str | Path,
    audit: ClampAudit = WRITE_AUDIT,
) -> Path:
    """Write a restored image as ``<pair_id>.png``, losslessly 8-bit.

    Out-of-range values are clamped and counted; NaNs are rejected outright.
    """
    if np.isnan(image).any():
        raise DatasetError(f"result {pair_id} contains NaNs")
    out_of_range = int(np.count_nonzero((image < 0.0) | (image > 1.0)))
    if out_of_range:
        logger.warning("result %s: clamped %d out-of-range values", pair_id, out_of_range)
        image = np.clip(image, 0.0, 1.0)
    audit.add(out_of_range)
    out_root = Path(out_root)
    out_root.mkdir(parents=True, exist_ok=True)
    path = out_root / f"{pair_id}.png"
    _save_png(image, path)
    return path
