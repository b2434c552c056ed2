"""Depth-ordered alpha-blending rasterizer.

The renderer expands every visible Gaussian's square footprint into
(gaussian, pixel) pairs, stable-sorts them by pixel (Gaussians are pre-sorted
front-to-back, so each pixel's pair run is already in blend order), and runs
the transmittance recurrence as a segmented log-space scan. That makes the
whole pass a handful of flat numpy kernels: no per-pixel Python, bitwise
deterministic, and independent of any worker schedule.

The transmittance chain is always evaluated in float64 regardless of the
configured parameter precision so the telescoping identity
``sum_i alpha_i T_i + T_final = 1`` survives to ~1e-13.

Blend records (one row per processed contributor) are kept on the output for
the backward pass and are the dominant transient allocation; their byte size
is reported for the memory accountant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core_math import (
    ALPHA_MAX,
    COV2D_DILATION,
    DEFAULT_NEAR,
    Camera,
    ProjectionBatch,
    eval_sh_color,
    footprint_bounds,
    project_gaussians,
)
from .gaussians import GaussianSet


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    alpha_max: float = ALPHA_MAX
    alpha_skip: float = 1.0 / 255.0
    t_stop: float = 1e-4
    early_stop: bool = True
    near: float = DEFAULT_NEAR
    dilation: float = COV2D_DILATION
    tile_size: int = 16
    depth_normalized: bool = False

    def oracle_mode(self) -> "RenderOptions":
        """Copy with early stop and the skip gate disabled (oracle tests)."""
        return RenderOptions(
            background=self.background,
            alpha_max=self.alpha_max,
            alpha_skip=0.0,
            t_stop=0.0,
            early_stop=False,
            near=self.near,
            dilation=self.dilation,
            tile_size=self.tile_size,
            depth_normalized=self.depth_normalized,
        )


@dataclass
class BlendRecords:
    """Per-contributor rows of one forward pass, pixel-major, blend-ordered."""

    pixel_id: np.ndarray  # (P,) int32 flat pixel index
    local: np.ndarray  # (P,) int32 index into `rows`
    alpha: np.ndarray  # (P,) in the set's precision
    t_entry: np.ndarray  # (P,) transmittance at entry, set precision
    rows: np.ndarray  # (G,) global Gaussian row ids, front-to-back render order
    structure_version: int
    step_version: int

    def nbytes(self) -> int:
        return (
            self.pixel_id.nbytes
            + self.local.nbytes
            + self.alpha.nbytes
            + self.t_entry.nbytes
            + self.rows.nbytes
        )


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    final_transmittance: np.ndarray  # (H, W)
    weight_sum: np.ndarray  # (H, W) sum of blend weights (= 1 - T_final)
    max_contrib: np.ndarray  # (N,) max over rays of alpha_i * tau_i (Eq-7 integrand)
    max_tau: np.ndarray  # (N,) max over rays of tau_i = alpha_i * T_i
    records: BlendRecords
    camera: Camera
    options: RenderOptions
    projection: ProjectionBatch = field(repr=False, default=None)


def _empty_records(n_rows: int, set_: GaussianSet) -> BlendRecords:
    return BlendRecords(
        pixel_id=np.zeros(0, dtype=np.int32),
        local=np.zeros(0, dtype=np.int32),
        alpha=np.zeros(0),
        t_entry=np.zeros(0),
        rows=np.zeros(n_rows, dtype=np.int64),
        structure_version=set_.structure_version,
        step_version=set_.step_version,
    )


def render(gaussians: GaussianSet, cam: Camera, opts: RenderOptions | None = None) -> RenderOutput:
    """Render color, blended depth, transmittance, and contribution stats."""
    if opts is None:
        opts = RenderOptions()
    H, W = cam.height, cam.width
    n = len(gaussians)
    dt = gaussians.dtype
    bg = np.asarray(opts.background, dtype=np.float64)

    def _background_output(proj):
        t_final = np.ones((H, W))
        return RenderOutput(
            color=np.tile(bg, (H, W, 1)).astype(dt),
            depth=np.zeros((H, W), dtype=dt),
            final_transmittance=t_final.astype(dt),
            weight_sum=np.zeros((H, W), dtype=dt),
            max_contrib=np.zeros(n),
            max_tau=np.zeros(n),
            records=_empty_records(0, gaussians),
            camera=cam,
            options=opts,
            projection=proj,
        )

    proj = project_gaussians(
        gaussians.positions, gaussians.rotations, gaussians.log_scales, cam,
        near=opts.near, dilation=opts.dilation,
    )
    vis = np.flatnonzero(proj.visible)
    if n == 0 or vis.size == 0:
        return _background_output(proj)

    order = vis[np.lexsort((vis, proj.depth[vis]))]  # front-to-back, id tie-break
    mean = proj.mean2d[order]
    conic = proj.conic[order]
    depth_g = proj.depth[order]
    opac = gaussians.opacities()[order]

    x0, x1, y0, y1 = footprint_bounds(mean, proj.radii[order], W, H)
    bw = x1 - x0
    bh = y1 - y0
    counts = np.maximum(bw, 0) * np.maximum(bh, 0)
    keep_g = counts > 0
    if not np.any(keep_g):
        return _background_output(proj)

    # Expand (gaussian, pixel) pairs, grouped per Gaussian in render order.
    # The splat evaluation runs in the set's precision; the transmittance
    # chain below is always float64.
    g_idx = np.flatnonzero(keep_g)
    counts_k = counts[g_idx].astype(np.int32)
    total = int(counts[g_idx].sum())
    if total >= 2**31:
        raise ValueError(f"render: {total} splat-pixel pairs exceeds the int32 budget")
    pair_local = np.repeat(g_idx.astype(np.int32), counts_k)
    starts = np.cumsum(counts_k, dtype=np.int32) - counts_k
    offset = np.arange(total, dtype=np.int32) - np.repeat(starts, counts_k)
    bw_pair = np.repeat(bw[g_idx].astype(np.int32), counts_k)
    local_row = offset // bw_pair
    px = np.repeat(x0[g_idx].astype(np.int32), counts_k) + (offset - local_row * bw_pair)
    py = np.repeat(y0[g_idx].astype(np.int32), counts_k) + local_row
    pixel_id = py * np.int32(W) + px

    mean_m = mean.astype(dt, copy=False)
    conic_m = conic.astype(dt, copy=False)
    opac_m = opac.astype(dt, copy=False)
    dx = (px + dt.type(0.5)) - mean_m[pair_local, 0]
    dy = (py + dt.type(0.5)) - mean_m[pair_local, 1]
    power = conic_m[pair_local, 0] * dx
    power *= dx
    tmp = conic_m[pair_local, 2] * dy
    tmp *= dy
    power += tmp
    power *= dt.type(-0.5)
    tmp = conic_m[pair_local, 1] * dx
    tmp *= dy
    power -= tmp
    alpha = np.exp(power, out=power)
    alpha *= opac_m[pair_local]
    np.minimum(alpha, dt.type(opts.alpha_max), out=alpha)

    live = alpha >= opts.alpha_skip if opts.alpha_skip > 0 else alpha > 0
    pair_local = pair_local[live]
    alpha = alpha[live].astype(np.float64)
    pixel_id = pixel_id[live]
    if alpha.size == 0:
        return _background_output(proj)

    # Pixel-major order with per-pixel depth order preserved: pairs are
    # generated front-to-back, so sorting the unique composite key
    # (pixel << 32 | pair index) is a stable pixel sort that also hands back
    # the permutation.
    comp = (pixel_id.astype(np.int64) << 32) | np.arange(len(pixel_id), dtype=np.int64)
    comp.sort()
    perm = (comp & 0xFFFFFFFF).astype(np.int64)
    pixel_id = (comp >> 32).astype(np.int32)
    pair_local_px = pair_local[perm]
    alpha_px = alpha[perm]

    # Segmented transmittance scan in log space (float64). Each pair's entry
    # and exit transmittance come from adjacent cumulative sums rebased at
    # the segment start; the blend weight is their difference and the pixel's
    # final transmittance is the last exit value, so the telescoping identity
    # sum(w) + T_final = 1 cancels to a few ulps by construction.
    def transmittance_scan(pix, alphas):
        log_t = np.log1p(-alphas)
        cum = np.cumsum(log_t)
        excl = cum - log_t
        first = np.empty(len(pix), dtype=bool)
        first[0] = True
        np.not_equal(pix[1:], pix[:-1], out=first[1:])
        seg_start = np.flatnonzero(first)
        seg_len = np.diff(np.append(seg_start, len(pix)))
        base = np.repeat(excl[seg_start], seg_len)
        t_entry = np.exp(excl - base)
        t_exit = np.exp(cum - base)
        seg_end = seg_start + seg_len - 1
        return t_entry, t_exit, seg_end

    t_entry, t_exit, seg_end = transmittance_scan(pixel_id, alpha_px)

    if opts.early_stop and opts.t_stop > 0:
        processed = t_entry >= opts.t_stop
        if not processed.all():
            pixel_id = pixel_id[processed]
            pair_local_px = pair_local_px[processed]
            alpha_px = alpha_px[processed]
            perm = perm[processed]
            t_entry, t_exit, seg_end = transmittance_scan(pixel_id, alpha_px)

    w = t_entry - t_exit  # alpha * T, via the exact telescoping form

    npix = H * W
    t_final = np.ones(npix)
    t_final[pixel_id[seg_end]] = t_exit[seg_end]
    weight_sum = np.bincount(pixel_id, weights=w, minlength=npix)

    view_dirs = gaussians.positions[order].astype(np.float64) - cam.center
    view_dirs /= np.linalg.norm(view_dirs, axis=1, keepdims=True)
    colors = eval_sh_color(gaussians.sh[order].astype(np.float64), view_dirs)

    img = np.empty((npix, 3))
    for ch in range(3):
        img[:, ch] = np.bincount(pixel_id, weights=w * colors[pair_local_px, ch], minlength=npix)
    img += t_final[:, None] * bg

    depth_img = np.bincount(pixel_id, weights=w * depth_g[pair_local_px], minlength=npix)
    if opts.depth_normalized:
        acc = 1.0 - t_final
        depth_img = np.divide(depth_img, acc, out=np.zeros_like(depth_img), where=acc > 1e-12)

    # Per-Gaussian contribution maxima, via the generation (gaussian-major)
    # order so the reduction is a contiguous group max. Early-stopped pairs
    # keep zeros (they were never processed).
    w_gen = np.zeros(len(pair_local), dtype=np.float64)
    contrib_gen = np.zeros_like(w_gen)
    w_gen[perm] = w
    contrib_gen[perm] = alpha_px * w
    max_tau = np.zeros(n)
    max_contrib = np.zeros(n)
    bounds = np.searchsorted(pair_local, np.arange(len(order) + 1))
    nonempty = bounds[1:] > bounds[:-1]
    if np.any(nonempty):
        starts_ne = bounds[:-1][nonempty]
        rows_ne = order[nonempty]
        max_tau[rows_ne] = np.maximum.reduceat(w_gen, starts_ne)
        max_contrib[rows_ne] = np.maximum.reduceat(contrib_gen, starts_ne)

    records = BlendRecords(
        pixel_id=pixel_id,
        local=pair_local_px,
        alpha=alpha_px.astype(dt, copy=False),
        t_entry=t_entry.astype(dt, copy=False),
        rows=order.astype(np.int64),
        structure_version=gaussians.structure_version,
        step_version=gaussians.step_version,
    )
    return RenderOutput(
        color=img.reshape(H, W, 3).astype(dt),
        depth=depth_img.reshape(H, W).astype(dt),
        final_transmittance=t_final.reshape(H, W).astype(dt),
        weight_sum=weight_sum.reshape(H, W).astype(dt),
        max_contrib=max_contrib,
        max_tau=max_tau,
        records=records,
        camera=cam,
        options=opts,
        projection=proj,
    )


@dataclass
class TileGrid:
    """Per-tile front-to-back contributor lists in CSR layout."""

    tile_size: int
    tiles_x: int
    tiles_y: int
    starts: np.ndarray  # (tiles_x * tiles_y + 1,)
    ids: np.ndarray  # (E,) Gaussian ids, per tile sorted by (depth, id)
    depths: np.ndarray  # (E,)

    def tile_list(self, tx: int, ty: int):
        t = ty * self.tiles_x + tx
        s, e = self.starts[t], self.starts[t + 1]
        return self.ids[s:e], self.depths[s:e]

    def tile_of_pixel(self, ix: int, iy: int):
        return ix // self.tile_size, iy // self.tile_size


def bin_and_sort(
    ids: np.ndarray,
    mean2d: np.ndarray,
    radius: np.ndarray,
    depth: np.ndarray,
    width: int,
    height: int,
    tile_size: int = 16,
) -> TileGrid:
    """Bin projected Gaussians into tiles; each list sorted by (depth, id).

    `ids` name the Gaussians (any integer labels); every Gaussian whose square
    footprint overlaps a tile appears in that tile's list.
    """
    ids = np.asarray(ids, dtype=np.int64)
    tiles_x = max(1, -(-width // tile_size))
    tiles_y = max(1, -(-height // tile_size))
    ntiles = tiles_x * tiles_y
    if ids.size == 0:
        return TileGrid(tile_size, tiles_x, tiles_y, np.zeros(ntiles + 1, dtype=np.int64),
                        np.zeros(0, dtype=np.int64), np.zeros(0))

    x0, x1, y0, y1 = footprint_bounds(mean2d, radius, width, height)
    tx0 = x0 // tile_size
    tx1 = (x1 - 1) // tile_size + 1
    ty0 = y0 // tile_size
    ty1 = (y1 - 1) // tile_size + 1
    ok = (x1 > x0) & (y1 > y0)
    tx0, tx1, ty0, ty1 = tx0[ok], tx1[ok], ty0[ok], ty1[ok]
    ids_k = ids[ok]
    depth_k = np.asarray(depth, dtype=np.float64)[ok]

    ncols = tx1 - tx0
    nrows = ty1 - ty0
    counts = ncols * nrows
    total = int(counts.sum())
    src = np.repeat(np.arange(len(ids_k)), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    offset = np.arange(total, dtype=np.int64) - np.repeat(starts, counts)
    ncol_pair = np.repeat(ncols, counts)
    r = offset // ncol_pair
    c = offset - r * ncol_pair
    tile = (np.repeat(ty0, counts) + r) * tiles_x + np.repeat(tx0, counts) + c

    sort = np.lexsort((ids_k[src], depth_k[src], tile))
    tile = tile[sort]
    src = src[sort]
    tile_starts = np.searchsorted(tile, np.arange(ntiles + 1))
    return TileGrid(tile_size, tiles_x, tiles_y, tile_starts, ids_k[src], depth_k[src])


def render_depth_at(
    gaussians: GaussianSet,
    cam: Camera,
    pixels,
    opts: RenderOptions | None = None,
):
    """Depth of the dominant contributor (largest blend weight alpha*T) at
    each queried pixel.

    `pixels` is a sequence of integer (row, col) pairs. Returns
    (depths, found): entries with no contributor above the skip gate hold NaN
    and found=False. Out-of-bounds pixels raise ValueError.
    """
    if opts is None:
        opts = RenderOptions()
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    H, W = cam.height, cam.width
    if pixels.size and (
        pixels[:, 0].min() < 0 or pixels[:, 0].max() >= H
        or pixels[:, 1].min() < 0 or pixels[:, 1].max() >= W
    ):
        raise ValueError("render_depth_at: pixel out of bounds")

    k = len(pixels)
    depths = np.full(k, np.nan)
    found = np.zeros(k, dtype=bool)
    if len(gaussians) == 0 or k == 0:
        return depths, found

    proj = project_gaussians(
        gaussians.positions, gaussians.rotations, gaussians.log_scales, cam,
        near=opts.near, dilation=opts.dilation,
    )
    vis = np.flatnonzero(proj.visible)
    if vis.size == 0:
        return depths, found

    grid = bin_and_sort(
        vis, proj.mean2d[vis], proj.radii[vis], proj.depth[vis], W, H, opts.tile_size
    )
    opac = gaussians.opacities()
    skip = opts.alpha_skip if opts.alpha_skip > 0 else np.finfo(np.float64).tiny

    for i, (row, col) in enumerate(pixels):
        tx, ty = grid.tile_of_pixel(int(col), int(row))
        ids, _ = grid.tile_list(tx, ty)
        if ids.size == 0:
            continue
        mean = proj.mean2d[ids]
        x = col + 0.5
        y = row + 0.5
        # Respect the support box: same bounds as the renderer.
        bx0, bx1, by0, by1 = footprint_bounds(mean, proj.radii[ids], W, H)
        inside = (col >= bx0) & (col < bx1) & (row >= by0) & (row < by1)
        dxq = x - mean[:, 0]
        dyq = y - mean[:, 1]
        co = proj.conic[ids]
        power = -0.5 * (co[:, 0] * dxq * dxq + co[:, 2] * dyq * dyq) - co[:, 1] * dxq * dyq
        alpha = np.minimum(opts.alpha_max, opac[ids] * np.exp(power)) * inside
        alpha = np.where(alpha >= skip, alpha, 0.0)
        if not np.any(alpha > 0):
            continue
        T = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
        weight = alpha * T
        j = int(np.argmax(weight))
        if alpha[j] > 0:
            depths[i] = proj.depth[ids[j]]
            found[i] = True
    return depths, found
