"""Supervision and regularisation terms, with gradients w.r.t. the rendered maps.

Every term reduces with a mean so the weights do not depend on resolution.
Depth and intensity use the ground-truth hit mask, ray-drop uses every pixel,
and the normal term additionally needs all four depth neighbours to be valid.
"""

from __future__ import annotations

import warnings
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .raster import MapGrads, RenderOutput, ray_table

EPS_BCE = 1e-6
TERMS = ("d", "int", "drop", "dist", "n", "ch")


@dataclass
class LossWeights:
    d: float = 10.0
    int: float = 0.05
    drop: float = 0.05
    dist: float = 0.1
    n: float = 0.1
    ch: float = 0.1

    def __post_init__(self):
        for name, value in asdict(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be non-negative")


def _masked_l1(x, target, mask):
    count = int(mask.sum())
    if count == 0:
        warnings.warn("empty hit mask; masked loss set to 0", RuntimeWarning, stacklevel=3)
        return 0.0, np.zeros_like(x)
    diff = np.where(mask, x - target, 0.0)
    return float(np.abs(diff).sum() / count), np.sign(diff) / count


def loss_depth(mean_depth, median_depth, gt_range, mask) -> float:
    a, _ = _masked_l1(mean_depth, gt_range, mask)
    b, _ = _masked_l1(median_depth, gt_range, mask)
    return a + b


def loss_intensity(intensity, gt_intensity, mask) -> float:
    return _masked_l1(intensity, gt_intensity, mask)[0]


def _bce(p, target):
    clipped = np.clip(p, EPS_BCE, 1.0 - EPS_BCE)
    value = -(target * np.log(clipped) + (1.0 - target) * np.log1p(-clipped))
    grad = -(target / clipped - (1.0 - target) / (1.0 - clipped))
    grad = np.where((p > EPS_BCE) & (p < 1.0 - EPS_BCE), grad, 0.0)
    return float(value.mean()), grad / p.size


def loss_raydrop(p, p_gt) -> float:
    """Mean binary cross-entropy over the whole panorama."""
    return _bce(np.asarray(p, dtype=np.float64), np.asarray(p_gt, dtype=np.float64))[0]


def loss_distortion(A, B, C) -> float:
    """Mean over pixels of ``sum_ij w_i w_j (r_i - r_j)^2 = 2 (A C - B^2)``."""
    per_pixel = 2.0 * (A * C - B * B)
    if np.any(per_pixel < -1e-9):
        warnings.warn("negative distortion value; accumulators are inconsistent",
                      RuntimeWarning, stacklevel=2)
    return float(per_pixel.mean())


def pseudo_normal(depth: np.ndarray, sensor, mask: np.ndarray | None = None):
    """Normals from finite differences of the back-projected depth map.

    Points are ``depth * dir`` in the sensor frame.  Azimuth neighbours wrap;
    the first and last rows, pixels with an invalid neighbour and degenerate
    cross products get a zero normal and ``valid = False``.
    Returns ``(normals (H, W, 3), valid (H, W))``.
    """
    normals, valid, _ = _pseudo_normal_parts(depth, sensor, mask)
    return normals, valid


def _pseudo_normal_parts(depth, sensor, mask):
    dirs = ray_table(sensor)[0]
    depth = np.asarray(depth, dtype=np.float64)
    if mask is None:
        mask = depth > 0
    p = depth[..., None] * dirs
    right = np.roll(p, -1, axis=1)
    left = np.roll(p, 1, axis=1)
    down = np.zeros_like(p)
    up = np.zeros_like(p)
    down[:-1] = p[1:]
    up[1:] = p[:-1]
    dx = right - left
    dy = down - up
    cross = np.cross(dx, dy)
    norm = np.linalg.norm(cross, axis=2)

    valid = mask & np.roll(mask, -1, axis=1) & np.roll(mask, 1, axis=1)
    valid[0] = False
    valid[-1] = False
    valid[1:-1] &= mask[2:] & mask[:-2]
    valid &= norm > 1e-12
    sign = np.where(np.sum(cross * dirs, axis=2) > 0, -1.0, 1.0)
    safe = np.where(valid, norm, 1.0)
    normals = np.where(valid[..., None], sign[..., None] * cross / safe[..., None], 0.0)
    parts = dict(dirs=dirs, dx=dx, dy=dy, cross=cross, norm=safe, sign=sign)
    return normals, valid, parts


def _pseudo_normal_vjp(g_normals, valid, parts):
    """Gradient of ``sum(g_normals * normals)`` with respect to the depth map."""
    unit = parts["cross"] / parts["norm"][..., None]
    g = np.where(valid[..., None], parts["sign"][..., None] * g_normals, 0.0)
    g_cross = (g - unit * np.sum(unit * g, axis=2, keepdims=True)) / parts["norm"][..., None]
    g_dx = np.cross(parts["dy"], g_cross)
    g_dy = np.cross(g_cross, parts["dx"])
    # dx = p[:, j+1] - p[:, j-1] (cyclic); dy = p[i+1] - p[i-1]
    g_p = np.roll(g_dx, 1, axis=1) - np.roll(g_dx, -1, axis=1)
    g_p[1:] += g_dy[:-1]
    g_p[:-1] -= g_dy[1:]
    return np.sum(g_p * parts["dirs"], axis=2)


def loss_normal(normal, pseudo, mask) -> float:
    count = int(mask.sum())
    if count == 0:
        return 0.0
    return float(np.sum(np.where(mask, 1.0 - np.sum(normal * pseudo, axis=2), 0.0)) / count)


def _chamfer_parts(a, b):
    da, ia = cKDTree(b).query(a)
    db, ib = cKDTree(a).query(b)
    return float(da.mean() + db.mean()), da, ia, db, ib


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric sum of mean (non-squared) nearest-neighbour distances."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("chamfer distance needs two non-empty point sets")
    return _chamfer_parts(a, b)[0]


def loss_chamfer(s_render, s_gt, n_cd: int | None = None, rng=None) -> float:
    s_render = np.asarray(s_render, dtype=np.float64).reshape(-1, 3)
    s_gt = np.asarray(s_gt, dtype=np.float64).reshape(-1, 3)
    if n_cd is not None:
        rng = rng or np.random.default_rng(0)
        s_render = _subsample(s_render, n_cd, rng)
        s_gt = _subsample(s_gt, n_cd, rng)
    return chamfer_distance(s_render, s_gt)


def _subsample_index(n, n_max, rng):
    if n <= n_max:
        return np.arange(n)
    return np.sort(rng.choice(n, size=n_max, replace=False))


def _subsample(points, n_max, rng):
    return points[_subsample_index(len(points), n_max, rng)]


def _chamfer_grad(a, b):
    """Gradient of the chamfer distance with respect to the points in ``a``."""
    value, da, ia, db, ib = _chamfer_parts(a, b)
    diff_a = a - b[ia]
    grad = diff_a / np.maximum(da, 1e-12)[:, None] / len(a)
    diff_b = a[ib] - b
    contrib = diff_b / np.maximum(db, 1e-12)[:, None] / len(b)
    np.add.at(grad, ib, contrib)
    return value, grad


def total_loss(terms: dict, weights: LossWeights) -> float:
    w = asdict(weights)
    return float(sum(w[k] * terms.get(k, 0.0) for k in TERMS))


def compute_losses(out: RenderOutput, gt_range: np.ndarray, gt_intensity: np.ndarray,
                   sensor, weights: LossWeights, n_cd: int = 16384, rng=None,
                   need_grad: bool = True):
    """Evaluate every term and the weighted total.

    Returns ``(terms, total, map_grads)`` where ``map_grads`` holds the gradient
    of the weighted total with respect to the render maps (``None`` when
    ``need_grad`` is false).
    """
    gt_range = np.asarray(gt_range, dtype=np.float64)
    gt_intensity = np.asarray(gt_intensity, dtype=np.float64)
    mask = gt_range > 0
    hw = gt_range.shape
    terms = {}
    g = MapGrads()

    v_mean, g_mean = _masked_l1(out.mean_depth, gt_range, mask)
    v_med, g_med = _masked_l1(out.median_depth, gt_range, mask)
    terms["d"] = v_mean + v_med
    terms["int"], g_int = _masked_l1(out.intensity, gt_intensity, mask)
    terms["drop"], g_drop = _bce(out.raydrop, (~mask).astype(np.float64))
    terms["dist"] = loss_distortion(out.distort_A, out.distort_B, out.distort_C)

    pseudo, pvalid, parts = _pseudo_normal_parts(out.mean_depth, sensor, mask)
    nvalid = pvalid & (np.linalg.norm(out.normal_sum, axis=2) > 0)
    terms["n"] = loss_normal(out.normal, pseudo, nvalid)

    dirs = ray_table(sensor)[0]
    render_mask = mask & (out.median_depth > 0)
    ch_grad = None
    if render_mask.any() and mask.any():
        rng = rng or np.random.default_rng(0)
        idx_r = np.flatnonzero(render_mask)
        idx_g = np.flatnonzero(mask)
        idx_r = idx_r[_subsample_index(len(idx_r), n_cd, rng)]
        idx_g = idx_g[_subsample_index(len(idx_g), n_cd, rng)]
        flat_dirs = dirs.reshape(-1, 3)
        pts_r = out.median_depth.reshape(-1)[idx_r, None] * flat_dirs[idx_r]
        pts_g = gt_range.reshape(-1)[idx_g, None] * flat_dirs[idx_g]
        terms["ch"], g_pts = _chamfer_grad(pts_r, pts_g)
        ch_grad = np.zeros(gt_range.size)
        ch_grad[idx_r] = np.sum(g_pts * flat_dirs[idx_r], axis=1)
        ch_grad = ch_grad.reshape(hw)
    else:
        terms["ch"] = 0.0
    total = total_loss(terms, weights)
    if not need_grad:
        return terms, total, None

    count_n = int(nvalid.sum())
    g_mean_depth = weights.d * g_mean
    g_normal = np.zeros(hw + (3,))
    if count_n:
        g_normal = np.where(nvalid[..., None], -weights.n * pseudo / count_n, 0.0)
        g_pseudo = np.where(nvalid[..., None], -weights.n * out.normal / count_n, 0.0)
        g_mean_depth = g_mean_depth + _pseudo_normal_vjp(g_pseudo, nvalid, parts)
    npix = gt_range.size
    g.mean_depth = g_mean_depth
    g.median_depth = weights.d * g_med
    if ch_grad is not None:
        g.median_depth = g.median_depth + weights.ch * ch_grad
    g.intensity = weights.int * g_int
    g.raydrop = weights.drop * g_drop
    g.normal = g_normal
    g.distort_A = weights.dist * 2.0 * out.distort_C / npix
    g.distort_B = weights.dist * -4.0 * out.distort_B / npix
    g.distort_C = weights.dist * 2.0 * out.distort_A / npix
    return terms, total, g
