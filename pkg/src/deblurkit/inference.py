"""Full-resolution restoration: padding, optional tiling, and TTA.

Models need spatial dims divisible by 16, so inputs are reflect-padded up to
the next multiple and cropped back afterwards.  Tiled mode trades memory for
a second pass of bookkeeping: overlapping tiles are blended with linear
feather weights and normalized by the accumulated weight, so a pointwise
model produces the untiled result exactly.  Test-time augmentation averages
the inverse-transformed restorations of flipped and slightly downscaled
variants of the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .data_io import ClampAudit, DatasetIndex, write_result

PAD_MULTIPLE = 16
TTA_TRANSFORMS = ("identity", "hflip", "vflip", "hvflip", "scale_down_10pct")

RESTORE_AUDIT = ClampAudit()


@dataclass(frozen=True)
class TtaSpec:
    transforms: tuple[str, ...] = ("identity", "hflip", "vflip")
    merge: str = "mean"

    def __post_init__(self) -> None:
        if "identity" not in self.transforms:
            raise ValueError("the identity transform is always included")
        for name in self.transforms:
            if name not in TTA_TRANSFORMS:
                raise ValueError(f"unknown TTA transform {name!r}")
        if len(set(self.transforms)) != len(self.transforms):
            raise ValueError("duplicate TTA transforms")
        if self.merge not in ("mean", "median"):
            raise ValueError(f"unknown merge mode {self.merge!r}")


def _to_tensor(image: np.ndarray) -> torch.Tensor:
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {image.shape}")
    return torch.from_numpy(np.ascontiguousarray(image)).float().permute(2, 0, 1)[None]


def _to_image(tensor: torch.Tensor, audit: ClampAudit) -> np.ndarray:
    arr = tensor[0].permute(1, 2, 0).numpy()
    if np.isnan(arr).any():
        raise ValueError("model produced NaNs")
    out_of_range = int(np.count_nonzero((arr < 0.0) | (arr > 1.0)))
    audit.add(out_of_range)
    return np.clip(arr, 0.0, 1.0).astype(np.float32)


def _forward_padded(model: torch.nn.Module, x: torch.Tensor) -> torch.Tensor:
    h, w = x.shape[-2:]
    pad_h = (PAD_MULTIPLE - h % PAD_MULTIPLE) % PAD_MULTIPLE
    pad_w = (PAD_MULTIPLE - w % PAD_MULTIPLE) % PAD_MULTIPLE
    if pad_h or pad_w:
        # Reflection needs pad < dim; tiny inputs fall back to replication.
        mode = "reflect" if pad_h < h and pad_w < w else "replicate"
        x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
    y = model(x)
    return y[..., :h, :w]


def restore(
    model: torch.nn.Module,
    image: np.ndarray,
    audit: ClampAudit = RESTORE_AUDIT,
) -> np.ndarray:
    """Restore one HxWx3 [0,1] image at its native resolution."""
    x = _to_tensor(image)
    try:
        with torch.no_grad():
            y = _forward_padded(model, x)
    except RuntimeError as exc:
        if "memory" in str(exc).lower():
            raise RuntimeError(
                f"out of memory at {image.shape[1]}x{image.shape[0]}; "
                "use restore_tiled for a bounded footprint"
            ) from exc
        raise
    return _to_image(y, audit)


def feather_weight(
    tile_h: int,
    tile_w: int,
    overlap: int,
    fade: tuple[bool, bool, bool, bool] = (True, True, True, True),
) -> np.ndarray:
    """Per-pixel blend weight for one tile: linear ramps over the overlap.

    ``fade`` flags (top, bottom, left, right) disable ramps on sides without
    a neighboring tile, so a uniformly strided grid sums to exactly one
    everywhere: complementary ramps meet in each seam.
    """

    def ramp(extent: int, lead: bool, trail: bool) -> np.ndarray:
        w = np.ones(extent, dtype=np.float64)
        if overlap > 0:
            ramp_up = np.arange(1, overlap + 1) / (overlap + 1)
            if lead:
                w[:overlap] = ramp_up
            if trail:
                w[extent - overlap :] = np.minimum(w[extent - overlap :], ramp_up[::-1])
        return w

    top, bottom, left, right = fade
    return np.outer(ramp(tile_h, top, bottom), ramp(tile_w, left, right))


def _tile_origins(extent: int, tile: int, stride: int) -> list[int]:
    if extent <= tile:
        return [0]
    origins = list(range(0, extent - tile, stride))
    origins.append(extent - tile)
    return origins


def restore_tiled(
    model: torch.nn.Module,
    image: np.ndarray,
    tile: int = 512,
    overlap: int = 32,
    audit: ClampAudit = RESTORE_AUDIT,
) -> np.ndarray:
    """Restore via overlapping tiles blended with linear feathering."""
    if tile <= 2 * overlap:
        raise ValueError(f"tile {tile} must exceed twice the overlap {overlap}")
    h, w = image.shape[:2]
    stride = tile - overlap
    accum = np.zeros((h, w, 3), dtype=np.float64)
    weight = np.zeros((h, w, 1), dtype=np.float64)
    with torch.no_grad():
        for y0 in _tile_origins(h, tile, stride):
            for x0 in _tile_origins(w, tile, stride):
                y1, x1 = min(y0 + tile, h), min(x0 + tile, w)
                patch = image[y0:y1, x0:x1]
                out = _forward_padded(model, _to_tensor(patch))[0].permute(1, 2, 0)
                fade = (y0 > 0, y1 < h, x0 > 0, x1 < w)
                tile_weight = feather_weight(y1 - y0, x1 - x0, overlap, fade)[..., None]
                accum[y0:y1, x0:x1] += out.numpy().astype(np.float64) * tile_weight
                weight[y0:y1, x0:x1] += tile_weight
    blended = (accum / weight).astype(np.float32)
    if np.isnan(blended).any():
        raise ValueError("model produced NaNs")
    out_of_range = int(np.count_nonzero((blended < 0.0) | (blended > 1.0)))
    audit.add(out_of_range)
    return np.clip(blended, 0.0, 1.0)


def _apply_transform(x: torch.Tensor, name: str) -> torch.Tensor:
    if name == "identity":
        return x
    if name == "hflip":
        return x.flip(-1)
    if name == "vflip":
        return x.flip(-2)
    if name == "hvflip":
        return x.flip(-1, -2)
    if name == "scale_down_10pct":
        h, w = x.shape[-2:]
        size = (max(1, round(h * 0.9)), max(1, round(w * 0.9)))
        return F.interpolate(
            x, size=size, mode="bilinear", align_corners=False, antialias=True
        )
    raise ValueError(f"unknown TTA transform {name!r}")


def _invert_transform(y: torch.Tensor, name: str, orig_hw: tuple[int, int]) -> torch.Tensor:
    if name in ("identity", "hflip", "vflip", "hvflip"):
        return _apply_transform(y, name)  # flips are involutions
    if name == "scale_down_10pct":
        return F.interpolate(y, size=orig_hw, mode="bilinear", align_corners=False)
    raise ValueError(f"unknown TTA transform {name!r}")


def tta_restore(
    model: torch.nn.Module,
    image: np.ndarray,
    spec: TtaSpec = TtaSpec(),
    audit: ClampAudit = RESTORE_AUDIT,
) -> np.ndarray:
    """Average the inverse-transformed restorations over the TTA variants.

    Costs exactly one forward pass per transform.
    """
    x = _to_tensor(image)
    orig_hw = tuple(x.shape[-2:])
    outputs = []
    with torch.no_grad():
        for name in spec.transforms:
            transformed = _apply_transform(x, name)
            restored = _forward_padded(model, transformed)
            outputs.append(_invert_transform(restored, name, orig_hw))
    stacked = torch.stack(outputs)
    merged = stacked.median(dim=0).values if spec.merge == "median" else stacked.mean(dim=0)
    return _to_image(merged, audit)


def restore_index(
    model: torch.nn.Module,
    index: DatasetIndex,
    out_root,
    tta: TtaSpec | None = None,
    tile: int | None = None,
    overlap: int = 32,
) -> list:
    """Restore every indexed blur image and write ``<pair_id>.png`` results."""
    from .data_io import load_image

    written = []
    for entry in index:
        image = load_image(entry.blur_path)
        if tta is not None:
            restored = tta_restore(model, image, tta)
        elif tile is not None:
            restored = restore_tiled(model, image, tile=tile, overlap=overlap)
        else:
            restored = restore(model, image)
        written.append(write_result(restored, entry.pair_id, out_root))
    return written
