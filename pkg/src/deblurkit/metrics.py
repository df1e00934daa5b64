"""Leaderboard scoring: warp pre-alignment, PSNR/SSIM/LPIPS, composite score.

Capture misalignment between a prediction and its ground truth is compensated
by estimating a global homography (pyramidal, intensity-driven) and warping
the prediction before the metrics.  PSNR is computed on the warp-valid
region; SSIM and LPIPS see invalid border pixels filled with ground truth so
they contribute zero difference.  The per-pixel metrics use float64, so exact
identities (SSIM(x, x) == 1.0, LPIPS(x, x) == 0.0) hold bitwise.

The composite score is a weighted sum of the three aggregates.  The weight on
the perceptual distance must be non-positive: lower LPIPS is better and must
never lower the score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import cv2
import numpy as np
import torch

from .data_io import DatasetIndex, DatasetError, load_image

PSNR_CAP_DB = 100.0
MISSING_LPIPS = 1.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class ScoreWeights:
    psnr_weight: float = 1.0
    ssim_weight: float = 0.0
    lpips_weight: float = 0.0

    def __post_init__(self) -> None:
        for value in (self.psnr_weight, self.ssim_weight, self.lpips_weight):
            if not math.isfinite(value):
                raise MetricError("score weights must be finite")
        if self.lpips_weight > 0:
            raise MetricError(
                "lpips_weight must be <= 0: lower perceptual distance is better "
                "and must never lower the score"
            )


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")


def mse(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray | None = None) -> float:
    _check_shapes(pred, gt)
    diff = pred.astype(np.float64) - gt.astype(np.float64)
    if mask is None:
        return float(np.mean(diff * diff))
    if mask.dtype != bool:
        mask = mask > 0.5
    if not mask.any():
        raise MetricError("empty valid mask")
    sq = diff * diff
    return float(sq[mask].mean())


def psnr(
    pred: np.ndarray,
    gt: np.ndarray,
    peak: float = 1.0,
    mask: np.ndarray | None = None,
) -> float:
    """10*log10(peak^2 / MSE), capped at 100 dB when the MSE is zero."""
    err = mse(pred, gt, mask)
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(peak * peak / err))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    g = cv2.getGaussianKernel(size, sigma)
    return (g @ g.T).astype(np.float64)


def _filter_valid(image: np.ndarray, window: np.ndarray) -> np.ndarray:
    pad = window.shape[0] // 2
    full = cv2.filter2D(image, -1, window, borderType=cv2.BORDER_CONSTANT)
    return full[pad:-pad, pad:-pad]


def ssim(pred: np.ndarray, gt: np.ndarray) -> float:
    """Windowed structural similarity, channel-averaged.

    11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.0;
    the map is evaluated on the fully valid interior only.
    """
    _check_shapes(pred, gt)
    h, w = pred.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise MetricError(f"image {h}x{w} smaller than the {SSIM_WINDOW}px window")
    window = _gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    x = pred.astype(np.float64)
    y = gt.astype(np.float64)
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    values = []
    for c in range(x.shape[2]):
        xc, yc = x[..., c], y[..., c]
        mu_x = _filter_valid(xc, window)
        mu_y = _filter_valid(yc, window)
        var_x = _filter_valid(xc * xc, window) - mu_x * mu_x
        var_y = _filter_valid(yc * yc, window) - mu_y * mu_y
        cov = _filter_valid(xc * yc, window) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        values.append(float(np.mean(num / den)))
    return float(np.mean(values))


@dataclass(frozen=True)
class FeatureStack:
    """One layer of perceptual features plus its trained channel weights."""

    activations: torch.Tensor  # (N, C, H, W)
    weights: torch.Tensor  # (C,)


class PerceptualBackend(Protocol):
    """Pretrained feature extractor interface for LPIPS-style distances.

    Backends operate on NCHW torch tensors in [0, 1] and may be used inside
    autograd graphs, so the same backend serves both the metric and the
    perceptual training loss.
    """

    name: str

    def features(self, image: torch.Tensor) -> list[FeatureStack]:
        ...


class StubPerceptualBackend:
    """Identity features with unit weights; for tests and plumbing checks.

    With this backend the perceptual distance reduces to the spatial mean of
    the channel-summed squared difference of unit-normalized pixels.
    """

    name = "stub-identity"

    def features(self, image: torch.Tensor) -> list[FeatureStack]:
        return [
            FeatureStack(image, torch.ones(image.shape[1], dtype=image.dtype))
        ]


def _unit_normalize(activations: torch.Tensor, eps: float = 1e-10) -> torch.Tensor:
    norm = torch.sqrt(torch.sum(activations * activations, dim=1, keepdim=True))
    return activations / (norm + eps)


def _to_nchw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image)).double().permute(2, 0, 1)[None]


def lpips_tensor(
    pred: torch.Tensor, gt: torch.Tensor, backend: PerceptualBackend
) -> torch.Tensor:
    """Differentiable form of :func:`lpips` on NCHW tensors."""
    total = None
    for fp, fg in zip(backend.features(pred), backend.features(gt)):
        diff = _unit_normalize(fp.activations) - _unit_normalize(fg.activations)
        weights = fp.weights.to(diff.dtype).view(1, -1, 1, 1)
        layer = (weights * diff * diff).sum(dim=1).mean()
        total = layer if total is None else total + layer
    return total


def lpips(pred: np.ndarray, gt: np.ndarray, backend: PerceptualBackend) -> float:
    """Weighted distance between unit-normalized feature maps.

    Per layer: channel-normalize both feature stacks, take the weighted sum
    over channels of the squared difference, average spatially; layers sum.
    """
    _check_shapes(pred, gt)
    if backend is None:
        raise MetricError(
            "no perceptual backend supplied; install/point to one, or score "
            "with lpips_weight=0 in no-perceptual mode"
        )
    with torch.no_grad():
        value = lpips_tensor(_to_nchw(pred), _to_nchw(gt), backend)
    return float(value)


def _luminance(image: np.ndarray) -> np.ndarray:
    img = image.astype(np.float32)
    if img.ndim == 2:
        return img
    return 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]


@dataclass(frozen=True)
class WarpResult:
    pred_warped: np.ndarray
    valid_mask: np.ndarray  # HxW bool
    success: bool
    homography: np.ndarray  # 3x3


def _scale_homography(h: np.ndarray, factor: float) -> np.ndarray:
    scaled = h.copy()
    scaled[0, 2] *= factor
    scaled[1, 2] *= factor
    scaled[2, 0] /= factor
    scaled[2, 1] /= factor
    return scaled


def align_warp(
    pred: np.ndarray,
    gt: np.ndarray,
    max_iterations: int = 200,
    eps: float = 1e-6,
    pyramid_levels: int = 3,
) -> WarpResult:
    """Estimate a global homography from pred to gt and warp pred.

    Intensity-based iterative maximization on the luminance channel, run
    coarse to fine.  Estimation failure (e.g. textureless inputs) degrades to
    the identity warp with ``success=False`` and a full valid mask.
    """
    _check_shapes(pred, gt)
    h, w = pred.shape[:2]
    identity = np.eye(3, dtype=np.float32)

    pred_lum = _luminance(pred)
    gt_lum = _luminance(gt)
    levels = max(1, min(pyramid_levels, int(math.log2(max(1, min(h, w) // 32))) + 1))
    criteria = (
        cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT,
        max_iterations,
        eps,
    )

    # Translation first, coarse to fine: it is robust at low resolution and
    # hands the full-DOF homography a good starting point.
    shift = np.zeros(2, dtype=np.float32)
    shift_found = False
    for level in reversed(range(levels)):
        scale = 1.0 / (2**level)
        if scale < 1.0:
            size = (max(8, round(w * scale)), max(8, round(h * scale)))
            pred_level = cv2.resize(pred_lum, size, interpolation=cv2.INTER_AREA)
            gt_level = cv2.resize(gt_lum, size, interpolation=cv2.INTER_AREA)
            factor = size[0] / w
        else:
            pred_level, gt_level = pred_lum, gt_lum
            factor = 1.0
        level_warp = np.array(
            [[1, 0, shift[0] * factor], [0, 1, shift[1] * factor]], dtype=np.float32
        )
        try:
            _, level_warp = cv2.findTransformECC(
                gt_level,
                pred_level,
                level_warp,
                cv2.MOTION_TRANSLATION,
                criteria,
                None,
                5,
            )
            shift = level_warp[:, 2] / factor
            shift_found = True
        except cv2.error:
            continue

    warp = identity.copy()
    warp[0, 2], warp[1, 2] = float(shift[0]), float(shift[1])
    success = shift_found
    try:
        _, warp = cv2.findTransformECC(
            gt_lum, pred_lum, warp, cv2.MOTION_HOMOGRAPHY, criteria, None, 5
        )
        success = bool(np.all(np.isfinite(warp)))
    except cv2.error:
        # Keep the translation-only warp when the full refinement diverges.
        warp = identity.copy()
        warp[0, 2], warp[1, 2] = float(shift[0]), float(shift[1])

    if not success:
        return WarpResult(
            pred_warped=pred.copy(),
            valid_mask=np.ones((h, w), dtype=bool),
            success=False,
            homography=identity,
        )

    if np.abs(warp - identity).max() < 1e-5:
        # Numerically the identity: skip the resampling so already-aligned
        # predictions stay bit-exact.
        return WarpResult(
            pred_warped=pred.copy(),
            valid_mask=np.ones((h, w), dtype=bool),
            success=True,
            homography=warp,
        )

    flags = cv2.INTER_LINEAR + cv2.WARP_INVERSE_MAP
    warped = cv2.warpPerspective(pred, warp, (w, h), flags=flags)
    mask = (
        cv2.warpPerspective(
            np.ones((h, w), dtype=np.float32),
            warp,
            (w, h),
            flags=cv2.INTER_NEAREST + cv2.WARP_INVERSE_MAP,
        )
        > 0.5
    )
    return WarpResult(
        pred_warped=warped, valid_mask=mask, success=True, homography=warp
    )


@dataclass(frozen=True)
class PairScore:
    pair_id: str
    psnr_db: float
    ssim: float
    lpips: float | None
    aligned: bool
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class MetricReport:
    rows: tuple[PairScore, ...]
    weights: ScoreWeights
    mean_psnr: float
    mean_ssim: float
    mean_lpips: float | None
    score: float
    valid_region_fraction: float
    verdict: str

    def to_csv(self) -> str:
        lines = ["pair_id,psnr,ssim,lpips,aligned"]
        for row in self.rows:
            lp = "" if row.lpips is None else f"{row.lpips:.6f}"
            lines.append(
                f"{row.pair_id},{row.psnr_db:.6f},{row.ssim:.6f},{lp},{int(row.aligned)}"
            )
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        lp = "-" if self.mean_lpips is None else f"{self.mean_lpips:.4f}"
        lines = [
            f"pairs          {len(self.rows)}",
            f"mean_psnr      {self.mean_psnr:.4f}",
            f"mean_ssim      {self.mean_ssim:.4f}",
            f"mean_lpips     {lp}",
            f"score          {self.score:.4f}",
            f"weights        psnr={self.weights.psnr_weight} "
            f"ssim={self.weights.ssim_weight} lpips={self.weights.lpips_weight}",
            f"valid_fraction {self.valid_region_fraction:.6f}",
            f"verdict        {self.verdict}",
        ]
        return "\n".join(lines) + "\n"


def composite_score(rows: Sequence[PairScore], weights: ScoreWeights) -> float:
    """Weighted sum of the aggregate PSNR, SSIM, and perceptual distance."""
    if not rows:
        raise MetricError("cannot score an empty row set")
    mean_psnr = sum(r.psnr_db for r in rows) / len(rows)
    mean_ssim = sum(r.ssim for r in rows) / len(rows)
    lpips_values = [r.lpips for r in rows if r.lpips is not None]
    mean_lpips = sum(lpips_values) / len(lpips_values) if lpips_values else 0.0
    return (
        weights.psnr_weight * mean_psnr
        + weights.ssim_weight * mean_ssim
        + weights.lpips_weight * mean_lpips
    )


def score_pair(
    pred: np.ndarray,
    gt: np.ndarray,
    weights: ScoreWeights = ScoreWeights(),
    backend: PerceptualBackend | None = None,
    align: bool = True,
) -> tuple[PairScore, float]:
    """Metrics for one prediction; returns (row, valid_region_fraction)."""
    _check_shapes(pred, gt)
    flags: list[str] = []
    valid_fraction = 1.0
    mask = None
    aligned = False
    if align:
        warp = align_warp(pred, gt)
        if warp.success:
            pred = warp.pred_warped
            mask = warp.valid_mask
            valid_fraction = float(mask.mean())
            aligned = True
        else:
            flags.append("warp_failed")

    pair_mse = mse(pred, gt, mask)
    if pair_mse == 0.0:
        psnr_db = PSNR_CAP_DB
        flags.append("psnr_capped")
    else:
        psnr_db = psnr(pred, gt, mask=mask)

    if mask is not None and not mask.all():
        filled = pred.copy()
        filled[~mask] = gt[~mask]
        pred_for_full = filled
    else:
        pred_for_full = pred
    ssim_value = ssim(pred_for_full, gt)

    if backend is not None:
        lpips_value = lpips(pred_for_full, gt, backend)
    else:
        lpips_value = None
        flags.append("no_perceptual")

    row = PairScore(
        pair_id="",
        psnr_db=psnr_db,
        ssim=ssim_value,
        lpips=lpips_value,
        aligned=aligned,
        flags=tuple(flags),
    )
    return row, valid_fraction


def score_submission(
    pred_dir: str | Path,
    gt_index: DatasetIndex,
    weights: ScoreWeights = ScoreWeights(),
    backend: PerceptualBackend | None = None,
    align: bool = True,
) -> MetricReport:
    """Score a directory of ``<pair_id>.png`` predictions against an index.

    Missing predictions are scored as worst case (0 dB, 0 SSIM) and flagged;
    the report verdict then reads "incomplete submission".  Row order follows
    the index, so repeated scoring is byte-identical.
    """
    pred_dir = Path(pred_dir)
    if not pred_dir.is_dir():
        raise MetricError(f"prediction directory {pred_dir} does not exist")

    rows: list[PairScore] = []
    fractions: list[float] = []
    missing = 0
    for entry in gt_index:
        if entry.sharp_path is None:
            raise DatasetError(f"pair {entry.pair_id} has no ground truth to score")
        gt = load_image(entry.sharp_path)
        pred_path = pred_dir / f"{entry.pair_id}.png"
        if not pred_path.exists():
            missing += 1
            rows.append(
                PairScore(
                    pair_id=entry.pair_id,
                    psnr_db=0.0,
                    ssim=0.0,
                    lpips=MISSING_LPIPS if backend is not None else None,
                    aligned=False,
                    flags=("missing_prediction",),
                )
            )
            fractions.append(1.0)
            continue
        pred = load_image(pred_path)
        row, fraction = score_pair(pred, gt, weights, backend, align)
        rows.append(
            PairScore(
                pair_id=entry.pair_id,
                psnr_db=row.psnr_db,
                ssim=row.ssim,
                lpips=row.lpips,
                aligned=row.aligned,
                flags=row.flags,
            )
        )
        fractions.append(fraction)

    mean_psnr = sum(r.psnr_db for r in rows) / len(rows)
    mean_ssim = sum(r.ssim for r in rows) / len(rows)
    lpips_values = [r.lpips for r in rows if r.lpips is not None]
    mean_lpips = sum(lpips_values) / len(lpips_values) if lpips_values else None
    return MetricReport(
        rows=tuple(rows),
        weights=weights,
        mean_psnr=mean_psnr,
        mean_ssim=mean_ssim,
        mean_lpips=mean_lpips,
        score=composite_score(rows, weights),
        valid_region_fraction=sum(fractions) / len(fractions),
        verdict="incomplete submission" if missing else "ok",
    )
