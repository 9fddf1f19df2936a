"""Front-to-back alpha compositing kernels shared by every projection model.

Splats are visited in depth order and scattered into their pixel boxes, which
is equivalent to per-pixel front-to-back blending.  Boxes are inclusive
``(u_lo, u_hi, v_lo, v_hi)``; with ``wrap`` the columns are taken modulo the
image width and the horizontal offset is wrapped to [-W/2, W/2).
"""
import math

import numpy as np
from numba import njit

ALPHA_MAX = 0.99
T_MIN = 1e-4


@njit(cache=True, nogil=True)
def _offset(pu, cu, width, wrap):
    dx = pu - cu
    if wrap:
        half = 0.5 * width
        dx = (dx + half) % width - half
    return dx


@njit(cache=True, nogil=True)
def composite_forward(order, centers, conics, opacities, colors, boxes, col_mask,
                      width, height, wrap, image, trans, n_contrib):
    """Fill ``image`` (H, W, 3), ``trans`` (final transmittance, preset to 1)
    and ``n_contrib`` (1 + rank of the last contributing splat, preset to 0)."""
    for k in range(order.shape[0]):
        i = order[k]
        cu = centers[i, 0]
        cv = centers[i, 1]
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        o = opacities[i]
        v_lo = max(boxes[i, 2], 0)
        v_hi = min(boxes[i, 3], height - 1)
        for v in range(v_lo, v_hi + 1):
            dy = v + 0.5 - cv
            for uu in range(boxes[i, 0], boxes[i, 1] + 1):
                if wrap:
                    u = uu % width
                elif uu < 0 or uu >= width:
                    continue
                else:
                    u = uu
                if not col_mask[u]:
                    continue
                t = trans[v, u]
                if t < T_MIN:
                    continue
                dx = _offset(u + 0.5, cu, width, wrap)
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                alpha = min(ALPHA_MAX, o * math.exp(power))
                w = alpha * t
                image[v, u, 0] += w * colors[i, 0]
                image[v, u, 1] += w * colors[i, 1]
                image[v, u, 2] += w * colors[i, 2]
                trans[v, u] = t * (1.0 - alpha)
                n_contrib[v, u] = k + 1


@njit(cache=True, nogil=True)
def composite_backward(order, centers, conics, opacities, colors, boxes, col_mask,
                       width, height, wrap, trans, n_contrib, grad_image,
                       g_centers, g_conics, g_opacities, g_colors):
    """Accumulate dL/d(center, conic, opacity, colour) given dL/d(image)."""
    t_run = trans.copy()
    acc = np.zeros((height, width, 3))
    for k in range(order.shape[0] - 1, -1, -1):
        i = order[k]
        cu = centers[i, 0]
        cv = centers[i, 1]
        a = conics[i, 0]
        b = conics[i, 1]
        c = conics[i, 2]
        o = opacities[i]
        c0 = colors[i, 0]
        c1 = colors[i, 1]
        c2 = colors[i, 2]
        gu = 0.0
        gv = 0.0
        ga = 0.0
        gb = 0.0
        gc = 0.0
        go = 0.0
        gc0 = 0.0
        gc1 = 0.0
        gc2 = 0.0
        v_lo = max(boxes[i, 2], 0)
        v_hi = min(boxes[i, 3], height - 1)
        for v in range(v_lo, v_hi + 1):
            dy = v + 0.5 - cv
            for uu in range(boxes[i, 0], boxes[i, 1] + 1):
                if wrap:
                    u = uu % width
                elif uu < 0 or uu >= width:
                    continue
                else:
                    u = uu
                if not col_mask[u]:
                    continue
                if k >= n_contrib[v, u]:
                    continue
                dx = _offset(u + 0.5, cu, width, wrap)
                power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
                g = math.exp(power)
                raw = o * g
                alpha = min(ALPHA_MAX, raw)
                one_m = 1.0 - alpha
                t_before = t_run[v, u] / one_m
                d0 = grad_image[v, u, 0]
                d1 = grad_image[v, u, 1]
                d2 = grad_image[v, u, 2]
                w = alpha * t_before
                gc0 += w * d0
                gc1 += w * d1
                gc2 += w * d2
                g_alpha = (d0 * (c0 * t_before - acc[v, u, 0] / one_m)
                           + d1 * (c1 * t_before - acc[v, u, 1] / one_m)
                           + d2 * (c2 * t_before - acc[v, u, 2] / one_m))
                acc[v, u, 0] += c0 * w
                acc[v, u, 1] += c1 * w
                acc[v, u, 2] += c2 * w
                t_run[v, u] = t_before
                if raw < ALPHA_MAX:
                    go += g_alpha * g
                    gp = g_alpha * raw
                    gu += gp * (a * dx + b * dy)
                    gv += gp * (b * dx + c * dy)
                    ga += -0.5 * gp * dx * dx
                    gb += -gp * dx * dy
                    gc += -0.5 * gp * dy * dy
        g_centers[i, 0] += gu
        g_centers[i, 1] += gv
        g_conics[i, 0] += ga
        g_conics[i, 1] += gb
        g_conics[i, 2] += gc
        g_opacities[i] += go
        g_colors[i, 0] += gc0
        g_colors[i, 1] += gc1
        g_colors[i, 2] += gc2


def run_forward(order, centers, conics, opacities, colors, boxes, col_mask, width, height, wrap):
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    composite_forward(order, centers, conics, opacities, colors, boxes, col_mask,
                      width, height, wrap, image, trans, n_contrib)
    return image, trans, n_contrib


def run_backward(order, centers, conics, opacities, colors, boxes, col_mask, width, height,
                 wrap, trans, n_contrib, grad_image):
    n = len(centers)
    g_centers = np.zeros((n, 2))
    g_conics = np.zeros((n, 3))
    g_opacities = np.zeros(n)
    g_colors = np.zeros((n, 3))
    composite_backward(order, centers, conics, opacities, colors, boxes, col_mask,
                       width, height, wrap, trans, n_contrib,
                       np.ascontiguousarray(grad_image, dtype=np.float64),
                       g_centers, g_conics, g_opacities, g_colors)
    return g_centers, g_conics, g_opacities, g_colors
