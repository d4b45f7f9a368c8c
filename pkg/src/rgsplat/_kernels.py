"""numba kernels for tile-based splat compositing."""

from __future__ import annotations

import math

import numba as nb
import numpy as np

TILE = 16
T_MIN = 1e-4  # compositing stops once transmittance falls below this
ALPHA_MAX = 0.999
CUTOFF_SQ = 9.0  # kernel support: Mahalanobis radius 3


# ---------------------------------------------------------------------------
# Splat compositing
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def bin_splats(means, radii, width, height):
    """Per-tile splat lists (CSR) for splats already in compositing order.

    ``radii[k]`` holds the half extents (rx, ry) of splat k's 3-sigma box.
    Tile lists preserve the input order.
    """
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    n = means.shape[0]
    counts = np.zeros(tw * th + 1, dtype=np.int64)
    rect = np.empty((n, 4), dtype=np.int64)
    for k in range(n):
        x0 = int(math.floor((means[k, 0] - radii[k, 0]) / TILE))
        x1 = int(math.floor((means[k, 0] + radii[k, 0]) / TILE))
        y0 = int(math.floor((means[k, 1] - radii[k, 1]) / TILE))
        y1 = int(math.floor((means[k, 1] + radii[k, 1]) / TILE))
        x0 = max(x0, 0)
        y0 = max(y0, 0)
        x1 = min(x1, tw - 1)
        y1 = min(y1, th - 1)
        rect[k, 0] = x0
        rect[k, 1] = x1
        rect[k, 2] = y0
        rect[k, 3] = y1
        for ty in range(y0, y1 + 1):
            for tx in range(x0, x1 + 1):
                counts[ty * tw + tx + 1] += 1
    offsets = np.cumsum(counts)
    fill = offsets[:-1].copy()
    ids = np.empty(offsets[-1], dtype=np.int64)
    for k in range(n):
        for ty in range(rect[k, 2], rect[k, 3] + 1):
            for tx in range(rect[k, 0], rect[k, 1] + 1):
                t = ty * tw + tx
                ids[fill[t]] = k
                fill[t] += 1
    return offsets, ids


@nb.njit(cache=True, inline="always")
def _alpha(mx, my, conic, opac, px, py):
    dx = px - mx
    dy = py - my
    q = conic[0] * dx * dx + 2.0 * conic[1] * dx * dy + conic[2] * dy * dy
    if q > CUTOFF_SQ:
        return 0.0, q, dx, dy
    a = opac * math.exp(-0.5 * q)
    return a, q, dx, dy


@nb.njit(parallel=True, cache=True)
def raster_tiles(means, conics, colors, opacs, offsets, ids, width, height, bg):
    """Front-to-back compositing per 16x16 tile.

    Returns color (H, W, C), final transmittance (H, W) and the count of list
    entries each pixel walked (needed by the backward pass).
    """
    C = colors.shape[1]
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    img = np.zeros((height, width, C))
    trans = np.ones((height, width))
    n_walk = np.zeros((height, width), dtype=np.int64)
    for t in nb.prange(tw * th):
        ty = t // tw
        tx = t % tw
        start = offsets[t]
        end = offsets[t + 1]
        for y in range(ty * TILE, min((ty + 1) * TILE, height)):
            for x in range(tx * TILE, min((tx + 1) * TILE, width)):
                px = x + 0.5
                py = y + 0.5
                T = 1.0
                walked = 0
                for e in range(start, end):
                    if T < T_MIN:
                        break
                    walked += 1
                    k = ids[e]
                    a, q, dx, dy = _alpha(means[k, 0], means[k, 1], conics[k], opacs[k], px, py)
                    if a <= 0.0:
                        continue
                    if a > ALPHA_MAX:
                        a = ALPHA_MAX
                    w = a * T
                    for c in range(C):
                        img[y, x, c] += w * colors[k, c]
                    T *= 1.0 - a
                for c in range(C):
                    img[y, x, c] += T * bg[c]
                trans[y, x] = T
                n_walk[y, x] = walked
    return img, trans, n_walk


@nb.njit(parallel=True, cache=True)
def raster_naive(means, conics, colors, opacs, width, height, bg):
    """Reference compositor: every pixel walks the full ordered splat list."""
    C = colors.shape[1]
    n = means.shape[0]
    img = np.zeros((height, width, C))
    trans = np.ones((height, width))
    for y in nb.prange(height):
        for x in range(width):
            px = x + 0.5
            py = y + 0.5
            T = 1.0
            for k in range(n):
                if T < T_MIN:
                    break
                a, q, dx, dy = _alpha(means[k, 0], means[k, 1], conics[k], opacs[k], px, py)
                if a <= 0.0:
                    continue
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                for c in range(C):
                    img[y, x, c] += a * T * colors[k, c]
                T *= 1.0 - a
            for c in range(C):
                img[y, x, c] += T * bg[c]
            trans[y, x] = T
    return img, trans


@nb.njit(cache=True)
def raster_tiles_backward(means, conics, colors, opacs, offsets, ids, width, height, bg, trans, n_walk,
                          g_img, g_alpha):
    """Adjoint of ``raster_tiles`` w.r.t. means, conics, colors and opacities.

    ``g_alpha`` is the upstream gradient of the alpha image ``1 - T_final``.
    Serial over tiles so gradient sums have a fixed order.
    """
    n, C = colors.shape
    tw = (width + TILE - 1) // TILE
    th = (height + TILE - 1) // TILE
    d_means = np.zeros((n, 2))
    d_conics = np.zeros((n, 3))
    d_colors = np.zeros((n, C))
    d_opacs = np.zeros(n)
    acc = np.empty(C)
    for t in range(tw * th):
        ty = t // tw
        tx = t % tw
        start = offsets[t]
        for y in range(ty * TILE, min((ty + 1) * TILE, height)):
            for x in range(tx * TILE, min((tx + 1) * TILE, width)):
                px = x + 0.5
                py = y + 0.5
                T_fin = trans[y, x]
                T = T_fin
                # colour of everything behind the current splat, per unit transmittance
                for c in range(C):
                    acc[c] = bg[c]
                ga = g_alpha[y, x]
                for e in range(start + n_walk[y, x] - 1, start - 1, -1):
                    k = ids[e]
                    a, q, dx, dy = _alpha(means[k, 0], means[k, 1], conics[k], opacs[k], px, py)
                    if a <= 0.0:
                        continue
                    clamped = a > ALPHA_MAX
                    if clamped:
                        a = ALPHA_MAX
                    T = T / (1.0 - a)
                    w = a * T
                    g_a = 0.0
                    for c in range(C):
                        gc = g_img[y, x, c]
                        d_colors[k, c] += w * gc
                        g_a += T * (colors[k, c] - acc[c]) * gc
                        acc[c] = a * colors[k, c] + (1.0 - a) * acc[c]
                    g_a += ga * T_fin / (1.0 - a)
                    if clamped:
                        continue
                    G = a / opacs[k]
                    d_opacs[k] += g_a * G
                    g_q = -0.5 * a * g_a
                    d_conics[k, 0] += g_q * dx * dx
                    d_conics[k, 1] += g_q * 2.0 * dx * dy
                    d_conics[k, 2] += g_q * dy * dy
                    d_means[k, 0] += -g_q * (2.0 * conics[k, 0] * dx + 2.0 * conics[k, 1] * dy)
                    d_means[k, 1] += -g_q * (2.0 * conics[k, 1] * dx + 2.0 * conics[k, 2] * dy)
    return d_means, d_conics, d_colors, d_opacs
