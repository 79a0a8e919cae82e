"""Numba kernels for splat compositing and its reverse-mode derivative.

Splats are visited in front-to-back order and each one touches only the
pixels of its ellipse bounding box.  Per pixel the forward pass records the
rank of the last contributing splat and the transmittance in front of it so
the backward pass can walk the same contributions back-to-front.

The footprint is ``opacity * (exp(-m/2) - e) / (1 - e)`` for Mahalanobis
distance ``m <= cut2`` with ``e = exp(-cut2/2)``, so it reaches zero at the
cutoff instead of jumping there.
"""

import numpy as np
from numba import njit

T_MIN = 1e-4


@njit(cache=True)
def composite_forward(order, uv, conic, opacity, color, depth, bbox, cut2, height, width):
    T = np.ones((height, width))
    rgb = np.zeros((height, width, 3))
    wdepth = np.zeros((height, width))
    acc = np.zeros((height, width))
    last = np.full((height, width), -1, dtype=np.int64)
    t_last = np.ones((height, width))
    e_cut = np.exp(-0.5 * cut2)
    norm = 1.0 / (1.0 - e_cut)
    for rank in range(order.shape[0]):
        k = order[rank]
        u = uv[k, 0]
        v = uv[k, 1]
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        op = opacity[k]
        z = depth[k]
        for y in range(bbox[k, 2], bbox[k, 3] + 1):
            dy = y - v
            for x in range(bbox[k, 0], bbox[k, 1] + 1):
                t = T[y, x]
                if t < T_MIN:
                    continue
                dx = x - u
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if m > cut2:
                    continue
                alpha = op * (np.exp(-0.5 * m) - e_cut) * norm
                if alpha <= 0.0:
                    continue
                w = alpha * t
                rgb[y, x, 0] += w * color[k, 0]
                rgb[y, x, 1] += w * color[k, 1]
                rgb[y, x, 2] += w * color[k, 2]
                wdepth[y, x] += w * z
                acc[y, x] += w
                last[y, x] = rank
                t_last[y, x] = t
                T[y, x] = t * (1.0 - alpha)
    return rgb, wdepth, acc, T, last, t_last


@njit(cache=True)
def composite_backward(order, uv, conic, opacity, color, depth, bbox, cut2,
                       last, t_last, g_rgb, g_wdepth, g_acc):
    """Per-splat gradients: d/d(u, v), d/d(conic a, b, c), d/d colour, d/d depth.

    ``conic`` holds (a, b, c) of the inverse 2D covariance [[a, b], [b, c]];
    the gradient for ``b`` is w.r.t. the single shared off-diagonal value.
    """
    n = uv.shape[0]
    height, width = last.shape
    g_uv = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_color = np.zeros((n, 3))
    g_depth = np.zeros(n)
    suffix = np.zeros((height, width))
    t_next = np.zeros((height, width))
    e_cut = np.exp(-0.5 * cut2)
    norm = 1.0 / (1.0 - e_cut)
    for rank in range(order.shape[0] - 1, -1, -1):
        k = order[rank]
        u = uv[k, 0]
        v = uv[k, 1]
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        op = opacity[k]
        z = depth[k]
        cr = color[k, 0]
        cg = color[k, 1]
        cb = color[k, 2]
        gu = 0.0
        gv = 0.0
        ga = 0.0
        gb = 0.0
        gc = 0.0
        gcr = 0.0
        gcg = 0.0
        gcb = 0.0
        gz = 0.0
        for y in range(bbox[k, 2], bbox[k, 3] + 1):
            dy = y - v
            for x in range(bbox[k, 0], bbox[k, 1] + 1):
                lr = last[y, x]
                if rank > lr:
                    continue
                dx = x - u
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if m > cut2:
                    continue
                g = op * np.exp(-0.5 * m) * norm
                alpha = g - op * e_cut * norm
                if alpha <= 0.0:
                    continue
                if rank == lr:
                    tk = t_last[y, x]
                else:
                    tk = t_next[y, x] / (1.0 - alpha)
                w = alpha * tk
                f = (cr * g_rgb[y, x, 0] + cg * g_rgb[y, x, 1] + cb * g_rgb[y, x, 2]
                     + z * g_wdepth[y, x] + g_acc[y, x])
                s = suffix[y, x]
                g_alpha = tk * (f - s)
                gcr += w * g_rgb[y, x, 0]
                gcg += w * g_rgb[y, x, 1]
                gcb += w * g_rgb[y, x, 2]
                gz += w * g_wdepth[y, x]
                gm = -0.5 * g * g_alpha
                gu += -2.0 * gm * (a * dx + b * dy)
                gv += -2.0 * gm * (b * dx + c * dy)
                ga += gm * dx * dx
                gb += 2.0 * gm * dx * dy
                gc += gm * dy * dy
                suffix[y, x] = f * alpha + (1.0 - alpha) * s
                t_next[y, x] = tk
        g_uv[k, 0] = gu
        g_uv[k, 1] = gv
        g_conic[k, 0] = ga
        g_conic[k, 1] = gb
        g_conic[k, 2] = gc
        g_color[k, 0] = gcr
        g_color[k, 1] = gcg
        g_color[k, 2] = gcb
        g_depth[k] = gz
    return g_uv, g_conic, g_color, g_depth


@njit(cache=True)
def covering_splats(order, uv, conic, opacity, bbox, cut2, height, width, max_k, min_alpha):
    """Per pixel, up to ``max_k`` splat indices in compositing order whose alpha
    there is at least ``min_alpha`` (unused slots hold -1)."""
    T = np.ones((height, width))
    out = np.full((height, width, max_k), -1, dtype=np.int64)
    count = np.zeros((height, width), dtype=np.int64)
    e_cut = np.exp(-0.5 * cut2)
    norm = 1.0 / (1.0 - e_cut)
    for rank in range(order.shape[0]):
        k = order[rank]
        u = uv[k, 0]
        v = uv[k, 1]
        a = conic[k, 0]
        b = conic[k, 1]
        c = conic[k, 2]
        op = opacity[k]
        for y in range(bbox[k, 2], bbox[k, 3] + 1):
            dy = y - v
            for x in range(bbox[k, 0], bbox[k, 1] + 1):
                t = T[y, x]
                if t < T_MIN or count[y, x] >= max_k:
                    continue
                dx = x - u
                m = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
                if m > cut2:
                    continue
                alpha = op * (np.exp(-0.5 * m) - e_cut) * norm
                if alpha <= 0.0:
                    continue
                if alpha >= min_alpha:
                    out[y, x, count[y, x]] = k
                    count[y, x] += 1
                T[y, x] = t * (1.0 - alpha)
    return out
