"""Numba compositing kernels.

Single-threaded by design: byte-identical outputs across runs and tile
sizes are contractual, so no atomics or parallel reductions are used.
Per-pixel work is bounded by the 3-sigma footprint test and early
termination once transmittance drops below TRANSMITTANCE_EPS.
"""

from __future__ import annotations

import numpy as np
from numba import njit

TRANSMITTANCE_EPS = 1e-4
FOOTPRINT_MAHA2 = 9.0  # 3 sigma
DEPTH_SENTINEL = -1.0


@njit(cache=True)
def bin_tiles(order, rect, width, height, tile):
    """CSR tile lists: which depth-ordered Gaussians touch which tile.

    rect rows are pixel-index ranges (x0, x1, y0, y1) inclusive; a Gaussian
    whose 3-sigma screen AABB misses the image has x0 > x1.
    """
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    ntiles = ntx * nty
    counts = np.zeros(ntiles + 1, dtype=np.int64)
    for oi in range(order.shape[0]):
        i = order[oi]
        x0, x1, y0, y1 = rect[i, 0], rect[i, 1], rect[i, 2], rect[i, 3]
        if x0 > x1 or y0 > y1:
            continue
        tx0 = x0 // tile
        tx1 = x1 // tile
        ty0 = y0 // tile
        ty1 = y1 // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    items = np.empty(offsets[-1], dtype=np.int64)
    fill = offsets[:-1].copy()
    for oi in range(order.shape[0]):
        i = order[oi]
        x0, x1, y0, y1 = rect[i, 0], rect[i, 1], rect[i, 2], rect[i, 3]
        if x0 > x1 or y0 > y1:
            continue
        tx0 = x0 // tile
        tx1 = x1 // tile
        ty0 = y0 // tile
        ty1 = y1 // tile
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * ntx + tx
                items[fill[t]] = i
                fill[t] += 1
    return offsets, items, ntx, nty


@njit(cache=True)
def composite_forward(
    width,
    height,
    tile,
    ntx,
    nty,
    offsets,
    items,
    mean2d,
    conic,
    alpha,
    depth,
    color,
    feat,
    out_rgb,
    out_feat,
    out_alpha,
    out_accz,
    out_depth,
    peak_w,
):
    fdim = feat.shape[1]
    for ty in range(nty):
        for tx in range(ntx):
            lo = offsets[ty * ntx + tx]
            hi = offsets[ty * ntx + tx + 1]
            if lo == hi:
                continue
            y_end = min(height, (ty + 1) * tile)
            x_end = min(width, (tx + 1) * tile)
            for py in range(ty * tile, y_end):
                pcy = py + 0.5
                for px in range(tx * tile, x_end):
                    pcx = px + 0.5
                    T = 1.0
                    for k in range(lo, hi):
                        i = items[k]
                        dx = pcx - mean2d[i, 0]
                        dy = pcy - mean2d[i, 1]
                        m = (
                            conic[i, 0] * dx * dx
                            + 2.0 * conic[i, 1] * dx * dy
                            + conic[i, 2] * dy * dy
                        )
                        if m > FOOTPRINT_MAHA2:
                            continue
                        ahat = alpha[i] * np.exp(-0.5 * m)
                        w = ahat * T
                        for c in range(3):
                            out_rgb[py, px, c] += w * color[i, c]
                        for c in range(fdim):
                            out_feat[py, px, c] += w * feat[i, c]
                        out_accz[py, px] += w * depth[i]
                        out_alpha[py, px] += w
                        if w > peak_w[i]:
                            peak_w[i] = w
                        T *= 1.0 - ahat
                        if T < TRANSMITTANCE_EPS:
                            break
    for py in range(height):
        for px in range(width):
            aw = out_alpha[py, px]
            if aw > 0.0:
                out_depth[py, px] = out_accz[py, px] / aw
            else:
                out_depth[py, px] = DEPTH_SENTINEL


@njit(cache=True)
def composite_backward(
    width,
    height,
    tile,
    ntx,
    nty,
    offsets,
    items,
    mean2d,
    conic,
    alpha,
    depth,
    color,
    feat,
    a_rgb,
    a_feat,
    a_alpha,
    a_depth,
    d_mean2d,
    d_conic,
    d_alpha,
    d_depthval,
    d_color,
    d_feat,
):
    fdim = feat.shape[1]
    max_len = 0
    for t in range(offsets.shape[0] - 1):
        ln = offsets[t + 1] - offsets[t]
        if ln > max_len:
            max_len = ln
    idx_buf = np.empty(max_len, dtype=np.int64)
    ahat_buf = np.empty(max_len)
    w_buf = np.empty(max_len)
    g_buf = np.empty(max_len)
    dx_buf = np.empty(max_len)
    dy_buf = np.empty(max_len)

    for ty in range(nty):
        for tx in range(ntx):
            lo = offsets[ty * ntx + tx]
            hi = offsets[ty * ntx + tx + 1]
            if lo == hi:
                continue
            y_end = min(height, (ty + 1) * tile)
            x_end = min(width, (tx + 1) * tile)
            for py in range(ty * tile, y_end):
                pcy = py + 0.5
                for px in range(tx * tile, x_end):
                    pcx = px + 0.5
                    # replay the forward scan for this pixel
                    T = 1.0
                    K = 0
                    accw = 0.0
                    accz = 0.0
                    for k in range(lo, hi):
                        i = items[k]
                        dx = pcx - mean2d[i, 0]
                        dy = pcy - mean2d[i, 1]
                        m = (
                            conic[i, 0] * dx * dx
                            + 2.0 * conic[i, 1] * dx * dy
                            + conic[i, 2] * dy * dy
                        )
                        if m > FOOTPRINT_MAHA2:
                            continue
                        g = np.exp(-0.5 * m)
                        ahat = alpha[i] * g
                        w = ahat * T
                        idx_buf[K] = i
                        ahat_buf[K] = ahat
                        w_buf[K] = w
                        g_buf[K] = g
                        dx_buf[K] = dx
                        dy_buf[K] = dy
                        K += 1
                        accw += w
                        accz += w * depth[i]
                        T *= 1.0 - ahat
                        if T < TRANSMITTANCE_EPS:
                            break
                    if K == 0:
                        continue
                    az_acc = 0.0
                    aw_extra = 0.0
                    adv = a_depth[py, px]
                    if accw > 0.0:
                        az_acc = adv / accw
                        aw_extra = -adv * accz / (accw * accw)
                    base = a_alpha[py, px] + aw_extra
                    r_acc = 0.0
                    for kk in range(K - 1, -1, -1):
                        i = idx_buf[kk]
                        ahat = ahat_buf[kk]
                        w = w_buf[kk]
                        g = g_buf[kk]
                        dx = dx_buf[kk]
                        dy = dy_buf[kk]
                        q = base + az_acc * depth[i]
                        for c in range(3):
                            q += a_rgb[py, px, c] * color[i, c]
                            d_color[i, c] += w * a_rgb[py, px, c]
                        for c in range(fdim):
                            q += a_feat[py, px, c] * feat[i, c]
                            d_feat[i, c] += w * a_feat[py, px, c]
                        d_depthval[i] += w * az_acc
                        T_i = w / ahat
                        g_ahat = T_i * q - r_acc / (1.0 - ahat)
                        r_acc += w * q
                        d_alpha[i] += g * g_ahat
                        g_m = -0.5 * g * alpha[i] * g_ahat
                        d_conic[i, 0] += g_m * dx * dx
                        d_conic[i, 1] += g_m * 2.0 * dx * dy
                        d_conic[i, 2] += g_m * dy * dy
                        gdx = g_m * (2.0 * conic[i, 0] * dx + 2.0 * conic[i, 1] * dy)
                        gdy = g_m * (2.0 * conic[i, 1] * dx + 2.0 * conic[i, 2] * dy)
                        d_mean2d[i, 0] -= gdx
                        d_mean2d[i, 1] -= gdy
