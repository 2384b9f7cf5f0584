"""JIT-compiled pixel loops for the splatter.

Every kernel walks Gaussians in the caller-supplied depth order and applies
the same per-contribution arithmetic, so the windowed fast path and the
brute-force per-pixel reference agree bit for bit. Gradient accumulation is
per Gaussian in a fixed order, independent of any outer threading.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def forward_blend(
    order, mu2d, conic, opac, color, bbox,
    ceiling, cutoff, radius_sq, background, image, trans,
):
    for oi in range(order.shape[0]):
        i = order[oi]
        u0, u1, v0, v1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        a = conic[i, 0, 0]
        b = conic[i, 0, 1]
        c = conic[i, 1, 1]
        o = opac[i]
        for v in range(v0, v1):
            dv = v - mu2d[i, 1]
            for u in range(u0, u1):
                du = u - mu2d[i, 0]
                maha = a * du * du + 2.0 * b * du * dv + c * dv * dv
                if maha > radius_sq:
                    continue
                alpha = o * math.exp(-0.5 * maha)
                if alpha > ceiling:
                    alpha = ceiling
                if alpha < cutoff:
                    continue
                t = trans[v, u]
                w = alpha * t
                image[v, u, 0] += w * color[i, 0]
                image[v, u, 1] += w * color[i, 1]
                image[v, u, 2] += w * color[i, 2]
                trans[v, u] = t * (1.0 - alpha)
    for v in range(image.shape[0]):
        for u in range(image.shape[1]):
            t = trans[v, u]
            image[v, u, 0] += t * background[0]
            image[v, u, 1] += t * background[1]
            image[v, u, 2] += t * background[2]


@njit(cache=True, nogil=True)
def reference_blend(
    order, mu2d, conic, opac, color,
    ceiling, cutoff, radius_sq, background, image, trans,
):
    height, width = image.shape[0], image.shape[1]
    for v in range(height):
        for u in range(width):
            t = 1.0
            r = 0.0
            g = 0.0
            bl = 0.0
            for oi in range(order.shape[0]):
                i = order[oi]
                du = u - mu2d[i, 0]
                dv = v - mu2d[i, 1]
                a = conic[i, 0, 0]
                b = conic[i, 0, 1]
                c = conic[i, 1, 1]
                maha = a * du * du + 2.0 * b * du * dv + c * dv * dv
                if maha > radius_sq:
                    continue
                alpha = opac[i] * math.exp(-0.5 * maha)
                if alpha > ceiling:
                    alpha = ceiling
                if alpha < cutoff:
                    continue
                w = alpha * t
                r += w * color[i, 0]
                g += w * color[i, 1]
                bl += w * color[i, 2]
                t = t * (1.0 - alpha)
            image[v, u, 0] = r + t * background[0]
            image[v, u, 1] = g + t * background[1]
            image[v, u, 2] = bl + t * background[2]
            trans[v, u] = t


@njit(cache=True, nogil=True)
def backward_replay(
    order, mu2d, conic, opac, color, bbox,
    ceiling, cutoff, radius_sq,
    total, grad_image,
    d_color, d_opac_act, g_mu2d, g_conic, partial, trans,
):
    """Replay the forward pass accumulating per-Gaussian gradient pieces.

    `total` must be the finished forward image. Outputs: d_color gets
    dL/d(color); d_opac_act gets dL/d(alpha) * density sums (the activation
    chain is applied by the caller); g_mu2d and g_conic collect screen-space
    position and inverse-covariance gradients. Pixels where the alpha ceiling
    clamped pass no gradient, matching the gate semantics.
    """
    for oi in range(order.shape[0]):
        i = order[oi]
        u0, u1, v0, v1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        a = conic[i, 0, 0]
        b = conic[i, 0, 1]
        c = conic[i, 1, 1]
        o = opac[i]
        for v in range(v0, v1):
            dv = v - mu2d[i, 1]
            for u in range(u0, u1):
                du = u - mu2d[i, 0]
                maha = a * du * du + 2.0 * b * du * dv + c * dv * dv
                if maha > radius_sq:
                    continue
                density = math.exp(-0.5 * maha)
                raw_alpha = o * density
                clamped = raw_alpha > ceiling
                alpha = ceiling if clamped else raw_alpha
                if alpha < cutoff:
                    continue
                t_before = trans[v, u]
                w = alpha * t_before
                partial[v, u, 0] += w * color[i, 0]
                partial[v, u, 1] += w * color[i, 1]
                partial[v, u, 2] += w * color[i, 2]
                trans[v, u] = t_before * (1.0 - alpha)

                g0 = grad_image[v, u, 0]
                g1 = grad_image[v, u, 1]
                g2 = grad_image[v, u, 2]
                d_color[i, 0] += g0 * w
                d_color[i, 1] += g1 * w
                d_color[i, 2] += g2 * w
                if clamped:
                    continue
                inv_rest = 1.0 / (1.0 - alpha)
                d_alpha = (
                    g0 * (t_before * color[i, 0] - (total[v, u, 0] - partial[v, u, 0]) * inv_rest)
                    + g1 * (t_before * color[i, 1] - (total[v, u, 1] - partial[v, u, 1]) * inv_rest)
                    + g2 * (t_before * color[i, 2] - (total[v, u, 2] - partial[v, u, 2]) * inv_rest)
                )
                d_opac_act[i] += d_alpha * density
                d_maha = d_alpha * o * density * -0.5
                g_mu2d[i, 0] -= d_maha * (2.0 * a * du + 2.0 * b * dv)
                g_mu2d[i, 1] -= d_maha * (2.0 * b * du + 2.0 * c * dv)
                g_conic[i, 0, 0] += d_maha * du * du
                g_conic[i, 1, 1] += d_maha * dv * dv
                off = d_maha * du * dv
                g_conic[i, 0, 1] += off
                g_conic[i, 1, 0] += off


@njit(cache=True, nogil=True)
def frozen_blend(
    order, mu2d, conic, opac, color, bbox,
    include, clamped, offsets,
    ceiling, background, image, trans,
):
    """Forward blend with the gate decisions supplied as flat masks.

    `include`/`clamped` hold one bool per window pixel per ordered Gaussian,
    concatenated; `offsets[oi]` is the start of Gaussian oi's window slab.
    Frozen-clamped pixels contribute the constant ceiling; everything else is
    a smooth function of the current parameters.
    """
    for oi in range(order.shape[0]):
        i = order[oi]
        u0, u1, v0, v1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        a = conic[i, 0, 0]
        b = conic[i, 0, 1]
        c = conic[i, 1, 1]
        o = opac[i]
        base = offsets[oi]
        wwin = u1 - u0
        for v in range(v0, v1):
            dv = v - mu2d[i, 1]
            row = base + (v - v0) * wwin
            for u in range(u0, u1):
                if not include[row + (u - u0)]:
                    continue
                if clamped[row + (u - u0)]:
                    alpha = ceiling
                else:
                    du = u - mu2d[i, 0]
                    maha = a * du * du + 2.0 * b * du * dv + c * dv * dv
                    alpha = o * math.exp(-0.5 * maha)
                t = trans[v, u]
                w = alpha * t
                image[v, u, 0] += w * color[i, 0]
                image[v, u, 1] += w * color[i, 1]
                image[v, u, 2] += w * color[i, 2]
                trans[v, u] = t * (1.0 - alpha)
    for v in range(image.shape[0]):
        for u in range(image.shape[1]):
            t = trans[v, u]
            image[v, u, 0] += t * background[0]
            image[v, u, 1] += t * background[1]
            image[v, u, 2] += t * background[2]


@njit(cache=True, nogil=True)
def gate_masks(
    order, mu2d, conic, opac, bbox,
    ceiling, cutoff, radius_sq, include, clamped, offsets,
):
    """Record the include/clamp decisions of a live forward pass."""
    for oi in range(order.shape[0]):
        i = order[oi]
        u0, u1, v0, v1 = bbox[i, 0], bbox[i, 1], bbox[i, 2], bbox[i, 3]
        a = conic[i, 0, 0]
        b = conic[i, 0, 1]
        c = conic[i, 1, 1]
        o = opac[i]
        base = offsets[oi]
        wwin = u1 - u0
        for v in range(v0, v1):
            dv = v - mu2d[i, 1]
            row = base + (v - v0) * wwin
            for u in range(u0, u1):
                du = u - mu2d[i, 0]
                maha = a * du * du + 2.0 * b * du * dv + c * dv * dv
                if maha > radius_sq:
                    continue
                alpha = o * math.exp(-0.5 * maha)
                cl = alpha > ceiling
                if cl:
                    alpha = ceiling
                if alpha < cutoff:
                    continue
                include[row + (u - u0)] = True
                clamped[row + (u - u0)] = cl
