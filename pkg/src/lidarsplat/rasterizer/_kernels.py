"""Tiled splatting kernels.

Layout: splats are depth-sorted once globally; a CSR pairing (tile_starts,
pair_splat) lists, per tile, the splats whose footprint touches it, in
front-to-back order. Each prange iteration owns one tile and writes only that
tile's pixels and that tile's pair slots, so results are bit-identical for
any worker count; per-splat reductions happen in a serial merge afterwards.
"""

import numpy as np
from numba import njit, prange

ALPHA_CLIP = 0.99
COVERAGE_ALPHA = 1.0 / 255.0


@njit(cache=True)
def fill_pairs(tx0, tx1, ty0, ty1, offsets, pair_tile, pair_splat, ntx):
    for i in range(len(tx0)):
        pos = offsets[i]
        for ty in range(ty0[i], ty1[i] + 1):
            for tx in range(tx0[i], tx1[i] + 1):
                pair_tile[pos] = ty * ntx + tx
                pair_splat[pos] = i
                pos += 1


@njit(cache=True, parallel=True)
def forward(
    means, conics, opacities, colors, depths, normals,
    tile_starts, pair_splat,
    width, height, tile_size, ntx,
    sigma_cut, term_T,
    color_buf, draw_buf, nraw_buf, alpha_buf, coverage,
):
    ntiles = len(tile_starts) - 1
    for t in prange(ntiles):
        s0, s1 = tile_starts[t], tile_starts[t + 1]
        if s0 == s1:
            continue
        tx, ty = t % ntx, t // ntx
        x0, y0 = tx * tile_size, ty * tile_size
        x1, y1 = min(x0 + tile_size, width), min(y0 + tile_size, height)
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                T = 1.0
                for s in range(s0, s1):
                    g = pair_splat[s]
                    dx = cx - means[g, 0]
                    dy = cy - means[g, 1]
                    a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
                    sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                    if sigma > sigma_cut or sigma < 0.0:
                        continue
                    alpha = opacities[g] * np.exp(-sigma)
                    if alpha > ALPHA_CLIP:
                        alpha = ALPHA_CLIP
                    w = alpha * T
                    color_buf[py, px, 0] += colors[g, 0] * w
                    color_buf[py, px, 1] += colors[g, 1] * w
                    color_buf[py, px, 2] += colors[g, 2] * w
                    draw_buf[py, px] += depths[g] * w
                    nraw_buf[py, px, 0] += normals[g, 0] * w
                    nraw_buf[py, px, 1] += normals[g, 1] * w
                    nraw_buf[py, px, 2] += normals[g, 2] * w
                    alpha_buf[py, px] += w
                    if alpha > COVERAGE_ALPHA:
                        coverage[s] += 1
                    T *= 1.0 - alpha
                    if T < term_T:
                        break


@njit(cache=True, parallel=True)
def backward(
    means, conics, opacities, colors, depths, normals,
    tile_starts, pair_splat,
    width, height, tile_size, ntx,
    sigma_cut, term_T,
    d_color, d_draw, d_nraw, d_alpha,
    pair_grads,
):
    """Per-pair gradient slots, columns:
    0:1 mean(u,v) is 0,1; conic(a,b,c) 2,3,4; opacity 5; color 6,7,8;
    depth 9; normal 10,11,12.
    """
    ntiles = len(tile_starts) - 1
    for t in prange(ntiles):
        s0, s1 = tile_starts[t], tile_starts[t + 1]
        if s0 == s1:
            continue
        n_pairs = s1 - s0
        alpha_loc = np.empty(n_pairs)
        T_loc = np.empty(n_pairs)
        G_loc = np.empty(n_pairs)
        slot_loc = np.empty(n_pairs, dtype=np.int64)
        tx, ty = t % ntx, t // ntx
        x0, y0 = tx * tile_size, ty * tile_size
        x1, y1 = min(x0 + tile_size, width), min(y0 + tile_size, height)
        for py in range(y0, y1):
            cy = py + 0.5
            for px in range(x0, x1):
                cx = px + 0.5
                dc0, dc1, dc2 = d_color[py, px, 0], d_color[py, px, 1], d_color[py, px, 2]
                ddr = d_draw[py, px]
                dn0, dn1, dn2 = d_nraw[py, px, 0], d_nraw[py, px, 1], d_nraw[py, px, 2]
                da = d_alpha[py, px]
                if dc0 == 0.0 and dc1 == 0.0 and dc2 == 0.0 and ddr == 0.0 \
                        and dn0 == 0.0 and dn1 == 0.0 and dn2 == 0.0 and da == 0.0:
                    continue
                # replay the forward compositing for this pixel
                T = 1.0
                n = 0
                for s in range(s0, s1):
                    g = pair_splat[s]
                    dx = cx - means[g, 0]
                    dy = cy - means[g, 1]
                    a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
                    sigma = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
                    if sigma > sigma_cut or sigma < 0.0:
                        continue
                    alpha = opacities[g] * np.exp(-sigma)
                    if alpha > ALPHA_CLIP:
                        alpha = ALPHA_CLIP
                    alpha_loc[n] = alpha
                    T_loc[n] = T
                    G_loc[n] = (
                        colors[g, 0] * dc0 + colors[g, 1] * dc1 + colors[g, 2] * dc2
                        + depths[g] * ddr
                        + normals[g, 0] * dn0 + normals[g, 1] * dn1 + normals[g, 2] * dn2
                        + da
                    )
                    slot_loc[n] = s
                    n += 1
                    T *= 1.0 - alpha
                    if T < term_T:
                        break
                # back-to-front accumulation of d(loss)/d(alpha_i)
                S = 0.0
                for j in range(n - 1, -1, -1):
                    s = slot_loc[j]
                    g = pair_splat[s]
                    alpha = alpha_loc[j]
                    Ti = T_loc[j]
                    w = alpha * Ti
                    Gj = G_loc[j]
                    d_alpha_i = Ti * Gj - S / (1.0 - alpha)
                    S += Gj * w
                    # buffer-value gradients
                    pair_grads[s, 6] += w * dc0
                    pair_grads[s, 7] += w * dc1
                    pair_grads[s, 8] += w * dc2
                    pair_grads[s, 9] += w * ddr
                    pair_grads[s, 10] += w * dn0
                    pair_grads[s, 11] += w * dn1
                    pair_grads[s, 12] += w * dn2
                    if alpha >= ALPHA_CLIP:
                        continue  # clipped: no gradient into opacity/shape
                    dx = cx - means[g, 0]
                    dy = cy - means[g, 1]
                    a, b, c = conics[g, 0], conics[g, 1], conics[g, 2]
                    gval = alpha / opacities[g]  # exp(-sigma)
                    pair_grads[s, 5] += gval * d_alpha_i
                    d_sigma = -alpha * d_alpha_i
                    pair_grads[s, 0] += d_sigma * (-(a * dx + b * dy))
                    pair_grads[s, 1] += d_sigma * (-(b * dx + c * dy))
                    pair_grads[s, 2] += d_sigma * 0.5 * dx * dx
                    pair_grads[s, 3] += d_sigma * dx * dy
                    pair_grads[s, 4] += d_sigma * 0.5 * dy * dy


@njit(cache=True)
def merge_pair_grads(pair_splat, pair_grads, out):
    for s in range(len(pair_splat)):
        g = pair_splat[s]
        for k in range(pair_grads.shape[1]):
            out[g, k] += pair_grads[s, k]
