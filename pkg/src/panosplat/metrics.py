"""Point-cloud and image metrics for simulated LiDAR frames."""

from __future__ import annotations

import math

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .losses import chamfer_distance

PSNR_CAP = 99.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WIN = 11


def chamfer(a, b) -> float:
    """Symmetric mean nearest-neighbour distance (non-squared), no sub-sampling."""
    return chamfer_distance(a, b)


def fscore(a, b, threshold: float = 0.05) -> float:
    """Harmonic mean of precision (A near B) and recall (B near A)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("F-score needs two non-empty point sets")
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    p = float(np.mean(da <= threshold))
    r = float(np.mean(db <= threshold))
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


def _masked_diff(x, x_gt, mask):
    x = np.asarray(x, dtype=np.float64)
    x_gt = np.asarray(x_gt, dtype=np.float64)
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("empty evaluation mask")
    return (x - x_gt)[mask]


def rmse(x, x_gt, mask=None) -> float:
    d = _masked_diff(x, x_gt, mask)
    return float(np.sqrt(np.mean(d * d)))


def medae(x, x_gt, mask=None) -> float:
    """Median absolute error; even counts take the lower middle value."""
    d = np.sort(np.abs(_masked_diff(x, x_gt, mask)))
    return float(d[(len(d) - 1) // 2])


def psnr(x, x_gt, mask=None, data_range: float = 1.0) -> float:
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    d = _masked_diff(x, x_gt, mask)
    mse = float(np.mean(d * d))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(data_range ** 2 / mse))


def _window_filter(img):
    """Gaussian window (11 taps, sigma 1.5): cyclic in azimuth, clamped in elevation."""
    radius = SSIM_WIN // 2
    truncate = radius / SSIM_SIGMA
    out = ndimage.gaussian_filter1d(img, SSIM_SIGMA, axis=0, mode="nearest", truncate=truncate)
    return ndimage.gaussian_filter1d(out, SSIM_SIGMA, axis=1, mode="wrap", truncate=truncate)


def ssim_map(x, x_gt, data_range: float = 1.0) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(x_gt, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("SSIM needs two maps of the same 2D shape")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mx = _window_filter(x)
    my = _window_filter(y)
    sxx = _window_filter(x * x) - mx * mx
    syy = _window_filter(y * y) - my * my
    sxy = _window_filter(x * y) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return num / den


def ssim(x, x_gt, data_range: float = 1.0) -> float:
    """Mean local SSIM over full maps (dropped pixels should be zero in both)."""
    return float(np.mean(ssim_map(x, x_gt, data_range)))


def frame_metrics(pred, gt, sensor, max_range: float | None = None,
                  fscore_threshold: float = 0.05) -> dict:
    """All metrics for one predicted frame against its ground truth.

    Pixel errors are taken over the intersection of the two hit masks; point
    metrics compare the full back-projected clouds in the sensor frame.
    """
    from .lidario import range_to_points

    max_range = max_range or sensor.max_range
    mask = pred.hit_mask & gt.hit_mask
    out = {"coverage": float(mask.sum() / max(gt.hit_mask.sum(), 1)),
           "drop_accuracy": float(np.mean(pred.hit_mask == gt.hit_mask))}
    pa, _ = range_to_points(pred, sensor, world=False)
    pb, _ = range_to_points(gt, sensor, world=False)
    if len(pa) and len(pb):
        out["chamfer"] = chamfer(pa, pb)
        out["fscore"] = fscore(pa, pb, fscore_threshold)
    else:
        out["chamfer"] = float("nan")
        out["fscore"] = 0.0
    if mask.any():
        out["depth_rmse"] = rmse(pred.range, gt.range, mask)
        out["depth_medae"] = medae(pred.range, gt.range, mask)
        out["depth_psnr"] = psnr(pred.range, gt.range, mask, max_range)
        out["intensity_rmse"] = rmse(pred.intensity, gt.intensity, mask)
        out["intensity_medae"] = medae(pred.intensity, gt.intensity, mask)
        out["intensity_psnr"] = psnr(pred.intensity, gt.intensity, mask, 1.0)
    else:
        for k in ("depth_rmse", "depth_medae", "depth_psnr", "intensity_rmse",
                  "intensity_medae", "intensity_psnr"):
            out[k] = float("nan")
    out["depth_ssim"] = ssim(pred.range, gt.range, max_range)
    out["intensity_ssim"] = ssim(pred.intensity, gt.intensity, 1.0)
    return out


def aggregate(rows: list[dict]) -> dict:
    """Mean of every numeric field across frames (NaNs ignored)."""
    if not rows:
        return {}
    keys = rows[0].keys()
    out = {}
    for k in keys:
        vals = np.array([r[k] for r in rows], dtype=np.float64)
        out[k] = float(np.nanmean(vals)) if np.isfinite(vals).any() else float("nan")
    return out
