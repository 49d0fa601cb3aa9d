"""Numba kernels for tile binning, panoramic blending and its adjoint.

All splat quantities arrive already in the sensor frame:
    A, B   scaled tangent axes s_u t_u, s_v t_v          (N, 3)
    C      centre at the render time                     (N, 3)
    opac   decayed opacity                               (N,)
    nrm    unit disk normal (unflipped)                  (N, 3)
    ish    intensity SH, dsh ray-drop SH                 (N, 9)
Per-pixel ray data: dirs, hx, hy (H, W, 3) and SH basis shb (H, W, 9).

Backward gradients are written per tile-list entry (one slot per (tile, splat)
pair) so tiles never share memory; the host reduces slots in entry order.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

SLOT_A = 0
SLOT_B = 3
SLOT_C = 6
SLOT_OPAC = 9
SLOT_NRM = 10
SLOT_ISH = 13
SLOT_DSH = 22
SLOT_WIDTH = 31


@njit(cache=True)
def _footprint(k, C, rad, opac, alpha_min, W, H, vmin, span, ts, col_mark):
    """Mark tile columns touched by splat ``k``; return its tile-row range or (-1, -1)."""
    tiles_x = col_mark.shape[0]
    tiles_y = (H + ts - 1) // ts
    for i in range(tiles_x):
        col_mark[i] = False
    if opac[k] < alpha_min:
        return -1, -1
    x = C[k, 0]
    y = C[k, 1]
    z = C[k, 2]
    d = math.sqrt(x * x + y * y + z * z)
    if d <= rad[k]:
        for i in range(tiles_x):
            col_mark[i] = True
        return 0, tiles_y - 1
    psi = math.asin(rad[k] / d)
    rho = math.sqrt(x * x + z * z)
    theta_c = math.atan2(rho, -y)
    th_lo = theta_c - psi
    th_hi = theta_c + psi
    eta_lo = int(math.ceil((th_lo - vmin) / span * H - 0.5)) - 1
    eta_hi = int(math.floor((th_hi - vmin) / span * H - 0.5)) + 1
    if eta_lo > H - 1 or eta_hi < 0:
        return -1, -1
    eta_lo = max(eta_lo, 0)
    eta_hi = min(eta_hi, H - 1)
    full = th_lo <= 0.0 or th_hi >= math.pi
    if not full:
        dphi = math.asin(min(1.0, math.sin(psi) / math.sin(theta_c)))
        phi_c = math.atan2(x, z)
        scale = W / (2.0 * math.pi)
        xi_lo = int(math.ceil((phi_c - dphi + math.pi) * scale - 0.5)) - 1
        xi_hi = int(math.floor((phi_c + dphi + math.pi) * scale - 0.5)) + 1
        if xi_hi - xi_lo + 1 >= W:
            full = True
        else:
            for xi in range(xi_lo, xi_hi + 1):
                col = ((xi % W) + W) % W
                col_mark[col // ts] = True
    if full:
        for i in range(tiles_x):
            col_mark[i] = True
    return eta_lo // ts, eta_hi // ts


@njit(cache=True)
def bin_kernel(C, rad, opac, alpha_min, W, H, vmin, span, ts):
    """Return (tile_id, prim) pairs for every splat/tile overlap."""
    tiles_x = (W + ts - 1) // ts
    n = C.shape[0]
    col_mark = np.zeros(tiles_x, dtype=np.bool_)
    total = 0
    for k in range(n):
        ty0, ty1 = _footprint(k, C, rad, opac, alpha_min, W, H, vmin, span, ts, col_mark)
        if ty0 < 0:
            continue
        ncol = 0
        for i in range(tiles_x):
            if col_mark[i]:
                ncol += 1
        total += ncol * (ty1 - ty0 + 1)
    tile_ids = np.empty(total, dtype=np.int64)
    prims = np.empty(total, dtype=np.int64)
    pos = 0
    for k in range(n):
        ty0, ty1 = _footprint(k, C, rad, opac, alpha_min, W, H, vmin, span, ts, col_mark)
        if ty0 < 0:
            continue
        for ty in range(ty0, ty1 + 1):
            for tx in range(tiles_x):
                if col_mark[tx]:
                    tile_ids[pos] = ty * tiles_x + tx
                    prims[pos] = k
                    pos += 1
    return tile_ids, prims


@njit(cache=True)
def _hit(k, A, B, C, dx, dy, dz, hx0, hx1, hx2, hy0, hy1, hy2, eps_det):
    ax = hx0 * A[k, 0] + hx1 * A[k, 1] + hx2 * A[k, 2]
    ay = hy0 * A[k, 0] + hy1 * A[k, 1] + hy2 * A[k, 2]
    bx = hx0 * B[k, 0] + hx1 * B[k, 1] + hx2 * B[k, 2]
    by = hy0 * B[k, 0] + hy1 * B[k, 1] + hy2 * B[k, 2]
    cx = hx0 * C[k, 0] + hx1 * C[k, 1] + hx2 * C[k, 2]
    cy = hy0 * C[k, 0] + hy1 * C[k, 1] + hy2 * C[k, 2]
    det = ax * by - bx * ay
    if abs(det) < eps_det:
        return False, 0.0, 0.0, 0.0
    u = -(by * cx - bx * cy) / det
    v = -(-ay * cx + ax * cy) / det
    px = A[k, 0] * u + B[k, 0] * v + C[k, 0]
    py = A[k, 1] * u + B[k, 1] * v + C[k, 1]
    pz = A[k, 2] * u + B[k, 2] * v + C[k, 2]
    r = dx * px + dy * py + dz * pz
    return True, u, v, r


@njit(cache=True)
def render_kernel(A, B, C, opac, nrm, ish, dsh, dirs, hx, hy, shb, offsets, entries, ts,
                  cutoff_sq, eps_det, eps_near, alpha_min, alpha_max, t_min,
                  mean, median, inten, pgs, nsum, acc, dist_a, dist_c, med_entry, n_proc):
    H = dirs.shape[0]
    W = dirs.shape[1]
    nsh = shb.shape[2]
    tiles_x = (W + ts - 1) // ts
    tiles_y = (H + ts - 1) // ts
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile % tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        for row in range(ty * ts, min((ty + 1) * ts, H)):
            for col in range(tx * ts, min((tx + 1) * ts, W)):
                dx = dirs[row, col, 0]
                dy = dirs[row, col, 1]
                dz = dirs[row, col, 2]
                T = 1.0
                s_d = 0.0
                s_i = 0.0
                s_p = 0.0
                s_a = 0.0
                s_c = 0.0
                n0 = 0.0
                n1 = 0.0
                n2 = 0.0
                med = 0.0
                med_e = -1
                last = start
                for e in range(start, end):
                    k = entries[e]
                    ok, u, v, r = _hit(k, A, B, C, dx, dy, dz,
                                       hx[row, col, 0], hx[row, col, 1], hx[row, col, 2],
                                       hy[row, col, 0], hy[row, col, 1], hy[row, col, 2],
                                       eps_det)
                    if not ok:
                        continue
                    q = u * u + v * v
                    if q > cutoff_sq or r <= eps_near:
                        continue
                    a = opac[k] * math.exp(-0.5 * q)
                    if a <= alpha_min:
                        continue
                    alpha = min(a, alpha_max)
                    w = alpha * T
                    lam = 0.0
                    rho = 0.0
                    for j in range(nsh):
                        lam += shb[row, col, j] * ish[k, j]
                        rho += shb[row, col, j] * dsh[k, j]
                    rho = min(max(rho, 0.0), 1.0)
                    sgn = 1.0
                    if nrm[k, 0] * dx + nrm[k, 1] * dy + nrm[k, 2] * dz > 0.0:
                        sgn = -1.0
                    s_d += w * r
                    s_i += w * lam
                    s_p += w * rho
                    s_a += w
                    s_c += w * r * r
                    n0 += w * sgn * nrm[k, 0]
                    n1 += w * sgn * nrm[k, 1]
                    n2 += w * sgn * nrm[k, 2]
                    # Median: last splat reached while transmittance is still above 1/2.
                    if T > 0.5:
                        med = r
                        med_e = e
                    T *= 1.0 - alpha
                    last = e + 1
                    if T < t_min:
                        break
                mean[row, col] = s_d
                median[row, col] = med
                inten[row, col] = s_i
                pgs[row, col] = s_p
                nsum[row, col, 0] = n0
                nsum[row, col, 1] = n1
                nsum[row, col, 2] = n2
                acc[row, col] = 1.0 - T
                dist_a[row, col] = s_a
                dist_c[row, col] = s_c
                med_entry[row, col] = med_e
                n_proc[row, col] = last


@njit(cache=True)
def backward_kernel(A, B, C, opac, nrm, ish, dsh, dirs, hx, hy, shb, offsets, entries, ts,
                    cutoff_sq, eps_det, eps_near, alpha_min, alpha_max,
                    g_d, g_a, g_c, g_i, g_p, g_n, g_med, med_entry, n_proc, slots):
    H = dirs.shape[0]
    W = dirs.shape[1]
    nsh = shb.shape[2]
    tiles_x = (W + ts - 1) // ts
    tiles_y = (H + ts - 1) // ts
    for tile in range(tiles_x * tiles_y):
        ty = tile // tiles_x
        tx = tile % tiles_x
        start = offsets[tile]
        end = offsets[tile + 1]
        size = end - start
        if size == 0:
            continue
        c_e = np.empty(size, dtype=np.int64)
        c_alpha = np.empty(size)
        c_a = np.empty(size)
        c_g = np.empty(size)
        c_u = np.empty(size)
        c_v = np.empty(size)
        c_r = np.empty(size)
        c_t = np.empty(size)
        c_lam = np.empty(size)
        c_rho = np.empty(size)
        c_rho_free = np.empty(size, dtype=np.bool_)
        c_sgn = np.empty(size)
        for row in range(ty * ts, min((ty + 1) * ts, H)):
            for col in range(tx * ts, min((tx + 1) * ts, W)):
                gd = g_d[row, col]
                ga = g_a[row, col]
                gc = g_c[row, col]
                gi = g_i[row, col]
                gp = g_p[row, col]
                gn0 = g_n[row, col, 0]
                gn1 = g_n[row, col, 1]
                gn2 = g_n[row, col, 2]
                gm = g_med[row, col]
                if (gd == 0.0 and ga == 0.0 and gc == 0.0 and gi == 0.0 and gp == 0.0
                        and gn0 == 0.0 and gn1 == 0.0 and gn2 == 0.0 and gm == 0.0):
                    continue
                dx = dirs[row, col, 0]
                dy = dirs[row, col, 1]
                dz = dirs[row, col, 2]
                # Replay the forward pass, keeping every contributor.
                T = 1.0
                m = 0
                for e in range(start, n_proc[row, col]):
                    k = entries[e]
                    ok, u, v, r = _hit(k, A, B, C, dx, dy, dz,
                                       hx[row, col, 0], hx[row, col, 1], hx[row, col, 2],
                                       hy[row, col, 0], hy[row, col, 1], hy[row, col, 2],
                                       eps_det)
                    if not ok:
                        continue
                    q = u * u + v * v
                    if q > cutoff_sq or r <= eps_near:
                        continue
                    G = math.exp(-0.5 * q)
                    a = opac[k] * G
                    if a <= alpha_min:
                        continue
                    alpha = min(a, alpha_max)
                    lam = 0.0
                    rho = 0.0
                    for j in range(nsh):
                        lam += shb[row, col, j] * ish[k, j]
                        rho += shb[row, col, j] * dsh[k, j]
                    c_rho_free[m] = 0.0 <= rho <= 1.0
                    rho = min(max(rho, 0.0), 1.0)
                    sgn = 1.0
                    if nrm[k, 0] * dx + nrm[k, 1] * dy + nrm[k, 2] * dz > 0.0:
                        sgn = -1.0
                    c_e[m] = e
                    c_alpha[m] = alpha
                    c_a[m] = a
                    c_g[m] = G
                    c_u[m] = u
                    c_v[m] = v
                    c_r[m] = r
                    c_t[m] = T
                    c_lam[m] = lam
                    c_rho[m] = rho
                    c_sgn[m] = sgn
                    T *= 1.0 - alpha
                    m += 1
                med_e = med_entry[row, col]
                S = 0.0
                for i in range(m - 1, -1, -1):
                    e = c_e[i]
                    k = entries[e]
                    alpha = c_alpha[i]
                    r = c_r[i]
                    u = c_u[i]
                    v = c_v[i]
                    Tk = c_t[i]
                    sgn = c_sgn[i]
                    w = alpha * Tk
                    ndot = sgn * (gn0 * nrm[k, 0] + gn1 * nrm[k, 1] + gn2 * nrm[k, 2])
                    F = gd * r + ga + gc * r * r + gi * c_lam[i] + gp * c_rho[i] + ndot
                    d_alpha = Tk * F - S / (1.0 - alpha)
                    S += w * F
                    g_r = w * (gd + 2.0 * gc * r)
                    if e == med_e:
                        g_r += gm
                    for j in range(nsh):
                        y = shb[row, col, j]
                        slots[e, SLOT_ISH + j] += w * gi * y
                        if c_rho_free[i]:
                            slots[e, SLOT_DSH + j] += w * gp * y
                    slots[e, SLOT_NRM + 0] += w * sgn * gn0
                    slots[e, SLOT_NRM + 1] += w * sgn * gn1
                    slots[e, SLOT_NRM + 2] += w * sgn * gn2
                    g_u = 0.0
                    g_v = 0.0
                    if c_a[i] < alpha_max:
                        a = c_a[i]
                        slots[e, SLOT_OPAC] += d_alpha * c_g[i]
                        g_u = -d_alpha * a * u
                        g_v = -d_alpha * a * v
                    # Hit solves [A B -d] (u, v, r)^T = -C; adjoint is -M^-T g.
                    a0 = A[k, 0]
                    a1 = A[k, 1]
                    a2 = A[k, 2]
                    b0 = B[k, 0]
                    b1 = B[k, 1]
                    b2 = B[k, 2]
                    m0 = -dx
                    m1 = -dy
                    m2 = -dz
                    # b x m, m x a, a x b
                    bm0 = b1 * m2 - b2 * m1
                    bm1 = b2 * m0 - b0 * m2
                    bm2 = b0 * m1 - b1 * m0
                    ma0 = m1 * a2 - m2 * a1
                    ma1 = m2 * a0 - m0 * a2
                    ma2 = m0 * a1 - m1 * a0
                    ab0 = a1 * b2 - a2 * b1
                    ab1 = a2 * b0 - a0 * b2
                    ab2 = a0 * b1 - a1 * b0
                    det = a0 * bm0 + a1 * bm1 + a2 * bm2
                    l0 = -(g_u * bm0 + g_v * ma0 + g_r * ab0) / det
                    l1 = -(g_u * bm1 + g_v * ma1 + g_r * ab1) / det
                    l2 = -(g_u * bm2 + g_v * ma2 + g_r * ab2) / det
                    slots[e, SLOT_C + 0] += l0
                    slots[e, SLOT_C + 1] += l1
                    slots[e, SLOT_C + 2] += l2
                    slots[e, SLOT_A + 0] += u * l0
                    slots[e, SLOT_A + 1] += u * l1
                    slots[e, SLOT_A + 2] += u * l2
                    slots[e, SLOT_B + 0] += v * l0
                    slots[e, SLOT_B + 1] += v * l1
                    slots[e, SLOT_B + 2] += v * l2


@njit(cache=True)
def reduce_slots(slots, entries, n_prims):
    out = np.zeros((n_prims, slots.shape[1]))
    for e in range(slots.shape[0]):
        k = entries[e]
        for j in range(slots.shape[1]):
            out[k, j] += slots[e, j]
    return out
