"""Real spherical harmonics up to degree 2.

Uses the sign convention common in splatting code: the Condon-Shortley phase is
kept, so ``Y_1 = (-C1*y, C1*z, -C1*x)``.  Directions are unit 3-vectors in the
sensor frame.
"""

from __future__ import annotations

import numpy as np

SH_DEGREE = 2
SH_COUNT = (SH_DEGREE + 1) ** 2

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)


def sh_basis(dirs: np.ndarray, degree: int = SH_DEGREE) -> np.ndarray:
    """Basis values ``Y_lm(dir)`` for every direction, shape ``(..., (degree+1)**2)``."""
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + ((degree + 1) ** 2,), dtype=np.float64)
    out[..., 0] = C0
    if degree >= 1:
        out[..., 1] = -C1 * y
        out[..., 2] = C1 * z
        out[..., 3] = -C1 * x
    if degree >= 2:
        out[..., 4] = C2[0] * x * y
        out[..., 5] = C2[1] * y * z
        out[..., 6] = C2[2] * (2.0 * z * z - x * x - y * y)
        out[..., 7] = C2[3] * x * z
        out[..., 8] = C2[4] * (x * x - y * y)
    if degree > 2:
        raise ValueError(f"SH degree {degree} not supported (max 2)")
    return out


def eval_sh(coeffs: np.ndarray, direction: np.ndarray) -> np.ndarray | float:
    """Evaluate the real SH expansion ``sum_lm c_lm Y_lm(direction)``.

    ``coeffs`` has shape ``(..., K)`` with ``K`` a perfect square no larger than 9.
    The direction must be unit length; the ray-drop channel is clamped by the caller.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    k = coeffs.shape[-1]
    degree = int(round(np.sqrt(k))) - 1
    if (degree + 1) ** 2 != k or degree > SH_DEGREE:
        raise ValueError(f"bad SH coefficient count {k}; expected 1, 4 or 9")
    norm = np.linalg.norm(direction, axis=-1)
    if np.any(np.abs(norm - 1.0) > 1e-6):
        raise ValueError("SH direction must be unit length")
    value = np.sum(coeffs * sh_basis(direction, degree), axis=-1)
    return float(value) if np.ndim(value) == 0 else value


def dc_for_value(value: np.ndarray | float) -> np.ndarray:
    """DC coefficient that makes the expansion evaluate to ``value`` everywhere."""
    return np.asarray(value, dtype=np.float64) / C0
