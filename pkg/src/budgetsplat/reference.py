"""Straight-line reference renderer: one global front-to-back sort, every
Gaussian evaluated densely against every pixel, no tiles, no scans, no early
stop.

This is the validation path for the production rasterizer (the two must agree
to float precision on any scene) and the renderer used to produce synthetic
ground-truth images. It is dense O(pixels x gaussians), so keep scenes small.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import ALPHA_MAX, Camera, eval_sh_color, footprint_bounds, project_gaussians
from .gaussians import GaussianSet


@dataclass
class ReferenceRender:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    final_transmittance: np.ndarray  # (H, W)
    max_contrib: np.ndarray  # (N,) max over rays of alpha * (alpha * T)
    max_tau: np.ndarray  # (N,) max over rays of alpha * T


def render_reference(
    gaussians: GaussianSet,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    alpha_max: float = ALPHA_MAX,
    alpha_skip: float = 0.0,
    t_stop: float = 0.0,
    near: float = 0.01,
    depth_normalized: bool = False,
) -> ReferenceRender:
    H, W = cam.height, cam.width
    n = len(gaussians)
    bg = np.asarray(background, dtype=np.float64)
    out = ReferenceRender(
        color=np.tile(bg, (H, W, 1)),
        depth=np.zeros((H, W)),
        final_transmittance=np.ones((H, W)),
        max_contrib=np.zeros(n),
        max_tau=np.zeros(n),
    )
    if n == 0:
        return out

    proj = project_gaussians(
        gaussians.positions, gaussians.rotations, gaussians.log_scales, cam, near=near
    )
    vis = np.flatnonzero(proj.visible)
    if vis.size == 0:
        return out
    order = vis[np.lexsort((vis, proj.depth[vis]))]  # front-to-back, id tie-break

    view_dirs = gaussians.positions[order].astype(np.float64) - cam.center
    view_dirs /= np.linalg.norm(view_dirs, axis=1, keepdims=True)
    colors = eval_sh_color(gaussians.sh[order].astype(np.float64), view_dirs)  # (G, 3)

    ys, xs = np.mgrid[0:H, 0:W]
    px = (xs + 0.5).ravel()  # (P,)
    py = (ys + 0.5).ravel()

    mean = proj.mean2d[order]  # (G, 2)
    conic = proj.conic[order]  # (G, 3)
    dx = px[:, None] - mean[None, :, 0]  # (P, G)
    dy = py[:, None] - mean[None, :, 1]
    power = -0.5 * (conic[None, :, 0] * dx * dx + conic[None, :, 2] * dy * dy) - conic[None, :, 1] * dx * dy
    opac = gaussians.opacities()[order]
    alpha = np.minimum(alpha_max, opac[None, :] * np.exp(power))  # (P, G)

    # Same support box as the tiled path: zero alpha outside it.
    x0, x1, y0, y1 = footprint_bounds(mean, proj.radii[order], W, H)
    ix = xs.ravel()[:, None]
    iy = ys.ravel()[:, None]
    inside = (ix >= x0[None, :]) & (ix < x1[None, :]) & (iy >= y0[None, :]) & (iy < y1[None, :])
    alpha *= inside
    if alpha_skip > 0.0:
        alpha *= alpha >= alpha_skip

    # T[:, i] = prod_{j<i} (1 - alpha_j), per pixel, in depth order.
    one_minus = 1.0 - alpha
    T = np.cumprod(one_minus, axis=1)
    T = np.concatenate([np.ones((T.shape[0], 1)), T[:, :-1]], axis=1)
    if t_stop > 0.0:
        # Early stop: contributors entering below t_stop are never processed.
        # They form a per-pixel suffix, so zeroing them leaves earlier
        # transmittances untouched; recompute T from the masked alphas.
        alpha = alpha * (T >= t_stop)
        one_minus = 1.0 - alpha
        T = np.cumprod(one_minus, axis=1)
        T = np.concatenate([np.ones((T.shape[0], 1)), T[:, :-1]], axis=1)
    t_final = T[:, -1] * one_minus[:, -1]
    w = alpha * T  # blend weights (P, G)

    color = w @ colors + t_final[:, None] * bg  # (P, 3)
    depth = w @ proj.depth[order]
    if depth_normalized:
        acc = 1.0 - t_final
        depth = np.divide(depth, acc, out=np.zeros_like(depth), where=acc > 1e-12)

    out.color = color.reshape(H, W, 3)
    out.depth = depth.reshape(H, W)
    out.final_transmittance = t_final.reshape(H, W)
    out.max_contrib[order] = np.max(alpha * w, axis=0)
    out.max_tau[order] = np.max(w, axis=0)
    return out
