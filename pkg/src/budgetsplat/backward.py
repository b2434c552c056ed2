"""Analytic reverse-mode gradients through the full splatting chain.

Pixel-space gradients enter through the blend records of a forward pass and
flow, per contributor, through alpha and the blend weights into the conic,
screen mean, opacity and color; a second, per-Gaussian stage continues
through the conic inverse, the projected covariance, the projection Jacobian,
the world covariance factorization R S S^T R^T, the quaternion map, and the
spherical-harmonics color with its view-direction dependence.

Blend-weight algebra: with weights w_i = alpha_i T_i and suffix color
S_i = sum_{j>i} c_j w_j + bg * T_final,

    dC/dc_i     = w_i
    dC/dalpha_i = c_i T_i - S_i / (1 - alpha_i)

Every formula here is validated against central finite differences in the
test suite.

Separately from the parameter gradients, the bundle carries the two
densification statistics: the per-view norm of the screen-space mean gradient
(in half-resolution NDC units so thresholds are resolution independent) and
the per-view norm of the color gradient, which the density controller mixes
into its hybrid growth criterion.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_math import quat_to_rotmat, sh_basis, sh_basis_grad
from .forward import RenderOutput
from .gaussians import GaussianSet
from .metrics import ssim_with_grad


class StaleRecordsError(RuntimeError):
    """Blend records do not match the current parameter state."""


@dataclass
class LossGrad:
    loss: float
    l1: float
    ssim: float
    d_color: np.ndarray  # (H, W, 3) dL/dC
    pixel_error_map: np.ndarray  # (H, W) >= 0


def loss_and_grad(
    rendered,
    target: np.ndarray,
    lam: float = 0.2,
    error_map_includes_ssim: bool = False,
) -> LossGrad:
    """loss = (1 - lam) * L1 + lam * (1 - SSIM), with dL/dC per pixel.

    The L1 gradient is normalized by the total element count. The error map
    ranks pixels for compensation: by default it is the channel norm of the
    raw residual (the quantity the L1 gradient is the sign of), since the
    sign gradient itself is flat wherever any channel differs; the flag folds
    in the SSIM gradient term instead.
    """
    img = rendered.color if isinstance(rendered, RenderOutput) else rendered
    img = np.asarray(img, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if img.shape != target.shape:
        raise ValueError(f"loss_and_grad: shape mismatch {img.shape} vs {target.shape}")

    diff = img - target
    n = diff.size
    l1 = float(np.mean(np.abs(diff)))
    grad = (1.0 - lam) * np.sign(diff) / n

    if lam > 0.0:
        mssim, ssim_grad = ssim_with_grad(img, target)
        grad = grad - lam * ssim_grad
    else:
        mssim = 1.0
    loss = (1.0 - lam) * l1 + lam * (1.0 - mssim)

    if error_map_includes_ssim:
        err_map = np.linalg.norm(grad, axis=-1)
    else:
        err_map = np.linalg.norm(diff, axis=-1) / n
    return LossGrad(loss=float(loss), l1=l1, ssim=float(mssim), d_color=grad, pixel_error_map=err_map)


@dataclass
class GradientBundle:
    d_position: np.ndarray  # (N, 3)
    d_rotation: np.ndarray  # (N, 4)
    d_log_scale: np.ndarray  # (N, 3)
    d_opacity_logit: np.ndarray  # (N,)
    d_sh: np.ndarray  # (N, 3, K)
    grad_pos2d_norm: np.ndarray  # (N,) per-view screen-mean gradient norm
    grad_color_norm: np.ndarray  # (N,) per-view color gradient norm
    contributed: np.ndarray  # (N,) bool, touched at least one pixel
    pixel_error_map: np.ndarray  # (H, W)

    def scaled(self, factor: float) -> "GradientBundle":
        return GradientBundle(
            d_position=self.d_position * factor,
            d_rotation=self.d_rotation * factor,
            d_log_scale=self.d_log_scale * factor,
            d_opacity_logit=self.d_opacity_logit * factor,
            d_sh=self.d_sh * factor,
            grad_pos2d_norm=self.grad_pos2d_norm * abs(factor),
            grad_color_norm=self.grad_color_norm * abs(factor),
            contributed=self.contributed.copy(),
            pixel_error_map=self.pixel_error_map * abs(factor),
        )


def _quat_rotmat_partials(q: np.ndarray):
    """dR/d(q_hat) for unit quaternions, stacked (V, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    V = len(q)
    P = np.zeros((V, 4, 3, 3))
    zero = np.zeros_like(w)
    P[:, 0] = 2.0 * np.stack(
        [np.stack([zero, -z, y], -1), np.stack([z, zero, -x], -1), np.stack([-y, x, zero], -1)], 1
    )
    P[:, 1] = 2.0 * np.stack(
        [np.stack([zero, y, z], -1), np.stack([y, -2 * x, -w], -1), np.stack([z, w, -2 * x], -1)], 1
    )
    P[:, 2] = 2.0 * np.stack(
        [np.stack([-2 * y, x, w], -1), np.stack([x, zero, z], -1), np.stack([-w, z, -2 * y], -1)], 1
    )
    P[:, 3] = 2.0 * np.stack(
        [np.stack([-2 * z, -w, x], -1), np.stack([w, -2 * z, y], -1), np.stack([x, y, zero], -1)], 1
    )
    return P


def backward(gaussians: GaussianSet, out: RenderOutput, loss_grads: LossGrad) -> GradientBundle:
    """Replay the blend records of `out` and produce exact parameter
    gradients for every Gaussian, plus the densification statistics."""
    rec = out.records
    if (
        rec.structure_version != gaussians.structure_version
        or rec.step_version != gaussians.step_version
    ):
        raise StaleRecordsError(
            "blend records were produced by a different parameter state "
            f"(records v{rec.structure_version}.{rec.step_version}, "
            f"set v{gaussians.structure_version}.{gaussians.step_version})"
        )

    cam = out.camera
    n = len(gaussians)
    K = gaussians.sh.shape[2]
    H, W = cam.height, cam.width
    bundle = GradientBundle(
        d_position=np.zeros((n, 3)),
        d_rotation=np.zeros((n, 4)),
        d_log_scale=np.zeros((n, 3)),
        d_opacity_logit=np.zeros(n),
        d_sh=np.zeros((n, 3, K)),
        grad_pos2d_norm=np.zeros(n),
        grad_color_norm=np.zeros(n),
        contributed=np.zeros(n, dtype=bool),
        pixel_error_map=loss_grads.pixel_error_map,
    )
    rows = rec.rows
    nvis = len(rows)
    if nvis == 0 or len(rec.pixel_id) == 0:
        return bundle

    # ---- Recompute the forward's per-Gaussian quantities (exact replay). ---
    proj = out.projection
    mean = proj.mean2d[rows]
    conic = proj.conic[rows]
    view_pos = proj.view_pos[rows]
    opac = gaussians.opacities()[rows]

    positions = gaussians.positions[rows].astype(np.float64)
    cam_center = cam.center
    d_world = positions - cam_center
    dist = np.linalg.norm(d_world, axis=1, keepdims=True)
    dirs = d_world / dist
    degree = gaussians.sh_degree
    B = sh_basis(dirs, degree)  # (V, K)
    sh = gaussians.sh[rows].astype(np.float64)
    colors_pre = 0.5 + np.einsum("vck,vk->vc", sh, B)
    colors = np.maximum(colors_pre, 0.0)

    # ---- Per-pair stage (runs in the records' precision; the global
    # cumulative sums stay float64 to dodge cancellation). -------------------
    dt = rec.alpha.dtype
    pix = rec.pixel_id
    local = rec.local
    alpha = rec.alpha
    t_entry = rec.t_entry
    w = alpha * t_entry

    dC = loss_grads.d_color.reshape(-1, 3).astype(dt)[pix]  # (P, 3)
    col_pair = colors.astype(dt)[local]  # (P, 3)

    first = np.empty(len(pix), dtype=bool)
    first[0] = True
    np.not_equal(pix[1:], pix[:-1], out=first[1:])
    seg_start = np.flatnonzero(first)
    seg_len = np.diff(np.append(seg_start, len(pix)))
    start_of = np.repeat(seg_start, seg_len)

    # Suffix color behind each contributor: total at the pixel (the rendered
    # color, background term included) minus the inclusive front prefix.
    cw = col_pair * w[:, None]  # (P, 3)
    cs = np.cumsum(cw, axis=0, dtype=np.float64)
    incl = cs - cs[start_of] + cw[start_of]
    total = np.asarray(out.color, dtype=np.float64).reshape(-1, 3)[pix]
    s_after = total - incl
    one_minus = dt.type(1.0) - alpha
    galpha = np.einsum(
        "pc,pc->p", dC, col_pair * t_entry[:, None] - (s_after / one_minus[:, None]).astype(dt)
    )

    unclamped = alpha < dt.type(out.options.alpha_max)
    gpow = np.where(unclamped, galpha * alpha, dt.type(0.0))
    g_o_pair = np.where(unclamped, galpha * alpha / opac.astype(dt)[local], dt.type(0.0))

    mean_m = mean.astype(dt, copy=False)
    conic_m = conic.astype(dt, copy=False)
    px = (pix % np.int32(W) + dt.type(0.5)) - mean_m[local, 0]
    py = (pix // np.int32(W) + dt.type(0.5)) - mean_m[local, 1]
    c0 = conic_m[local, 0]
    c1 = conic_m[local, 1]
    c2 = conic_m[local, 2]
    gmx_pair = gpow * (c0 * px + c1 * py)
    gmy_pair = gpow * (c1 * px + c2 * py)
    gA00_pair = -0.5 * gpow * px * px
    gA01_pair = -gpow * px * py
    gA11_pair = -0.5 * gpow * py * py

    def per_gaussian(v):
        return np.bincount(local, weights=v, minlength=nvis)

    counts = np.bincount(local, minlength=nvis)
    touched = counts > 0
    g_color = np.stack([per_gaussian(w * dC[:, ch]) for ch in range(3)], axis=1)  # (V, 3)
    g_opac = per_gaussian(g_o_pair)
    gmx = per_gaussian(gmx_pair)
    gmy = per_gaussian(gmy_pair)
    g1 = per_gaussian(gA00_pair)
    g2 = per_gaussian(gA01_pair)
    g3 = per_gaussian(gA11_pair)

    # ---- Per-Gaussian stage. ------------------------------------------------
    d_logit = g_opac * opac * (1.0 - opac)

    # Color -> SH coefficients and view direction (clamp gates the sh path).
    gate = (colors_pre > 0).astype(np.float64)
    g_pre = g_color * gate  # (V, 3)
    d_sh = np.einsum("vc,vk->vck", g_pre, B)
    Gb = sh_basis_grad(dirs, degree)  # (V, K, 3)
    d_dir = np.einsum("vc,vck,vkd->vd", g_pre, sh, Gb)
    d_mu_color = (d_dir - dirs * np.sum(dirs * d_dir, axis=1, keepdims=True)) / dist

    # Conic -> dilated 2D covariance (a, b, c): dSigma = -A Gm A.
    p, q, r = conic[:, 0], conic[:, 1], conic[:, 2]
    m00 = p * g1 + q * (g2 / 2)
    m01 = p * (g2 / 2) + q * g3
    m10 = q * g1 + r * (g2 / 2)
    m11 = q * (g2 / 2) + r * g3
    h00 = -(m00 * p + m01 * q)
    h01 = -(m00 * q + m01 * r)
    h10 = -(m10 * p + m11 * q)
    h11 = -(m10 * q + m11 * r)
    ga, gb_, gc = h00, h01 + h10, h11

    # (a, b, c) -> T = J W_r and world covariance Sigma.
    Rg = quat_to_rotmat(gaussians.rotations[rows])
    s_act = np.exp(gaussians.log_scales[rows].astype(np.float64))
    Nf = Rg * s_act[:, None, :]  # R S
    Sigma = Nf @ np.swapaxes(Nf, 1, 2)

    tx, ty, tz = view_pos[:, 0], view_pos[:, 1], view_pos[:, 2]
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z
    J = np.zeros((nvis, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * tx * inv_z2
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * ty * inv_z2
    T = J @ cam.R
    T0, T1 = T[:, 0, :], T[:, 1, :]

    u0 = np.einsum("vij,vj->vi", Sigma, T0)
    u1 = np.einsum("vij,vj->vi", Sigma, T1)
    dT = np.empty((nvis, 2, 3))
    dT[:, 0, :] = 2.0 * ga[:, None] * u0 + gb_[:, None] * u1
    dT[:, 1, :] = 2.0 * gc[:, None] * u1 + gb_[:, None] * u0
    dSigma = (
        ga[:, None, None] * np.einsum("vi,vj->vij", T0, T0)
        + gb_[:, None, None] * np.einsum("vi,vj->vij", T0, T1)
        + gc[:, None, None] * np.einsum("vi,vj->vij", T1, T1)
    )

    dJ = dT @ cam.R.T  # (V, 2, 3)
    dt = np.zeros((nvis, 3))
    dt[:, 0] = dJ[:, 0, 2] * (-cam.fx * inv_z2)
    dt[:, 1] = dJ[:, 1, 2] * (-cam.fy * inv_z2)
    dt[:, 2] = (
        dJ[:, 0, 0] * (-cam.fx * inv_z2)
        + dJ[:, 1, 1] * (-cam.fy * inv_z2)
        + dJ[:, 0, 2] * (2.0 * cam.fx * tx * inv_z2 * inv_z)
        + dJ[:, 1, 2] * (2.0 * cam.fy * ty * inv_z2 * inv_z)
    )
    # Screen-mean gradient also reaches the view position.
    dt[:, 0] += gmx * cam.fx * inv_z
    dt[:, 1] += gmy * cam.fy * inv_z
    dt[:, 2] += -(gmx * cam.fx * tx + gmy * cam.fy * ty) * inv_z2

    d_position = dt @ cam.R + d_mu_color

    # Sigma = N N^T with N = R S.
    dN = (dSigma + np.swapaxes(dSigma, 1, 2)) @ Nf
    RtdN = np.einsum("vji,vjk->vik", Rg, dN)  # R^T dN
    d_log_scale = np.einsum("vii->vi", RtdN) * s_act
    dRg = dN * s_act[:, None, :]  # dN @ diag(s)

    q_raw = gaussians.rotations[rows].astype(np.float64)
    q_norm = np.linalg.norm(q_raw, axis=1, keepdims=True)
    q_hat = q_raw / q_norm
    P4 = _quat_rotmat_partials(q_hat)
    d_qhat = np.einsum("vqij,vij->vq", P4, dRg)
    d_rotation = (d_qhat - q_hat * np.sum(q_hat * d_qhat, axis=1, keepdims=True)) / q_norm

    # ---- Scatter into full-length arrays; untouched rows stay zero. --------
    tm = touched
    ridx = rows[tm]
    bundle.d_position[ridx] = d_position[tm]
    bundle.d_rotation[ridx] = d_rotation[tm]
    bundle.d_log_scale[ridx] = d_log_scale[tm]
    bundle.d_opacity_logit[ridx] = d_logit[tm]
    bundle.d_sh[ridx] = d_sh[tm]
    bundle.contributed[ridx] = True
    # Densification statistics: NDC half-resolution units for the mean.
    bundle.grad_pos2d_norm[ridx] = np.hypot(gmx[tm] * (W / 2.0), gmy[tm] * (H / 2.0))
    bundle.grad_color_norm[ridx] = np.linalg.norm(g_color[tm], axis=1)
    return bundle


def accumulate_densify_stats(gaussians: GaussianSet, bundle: GradientBundle) -> None:
    """Fold one view's statistics into the running accumulators (additive)."""
    dt = gaussians.dtype
    gaussians.grad_pos2d_accum += bundle.grad_pos2d_norm.astype(dt)
    gaussians.grad_color_accum += bundle.grad_color_norm.astype(dt)
    gaussians.grad_pos3d_sum += bundle.d_position.astype(dt)
    gaussians.accum_count += bundle.contributed


def hybrid_score(
    pos_accum: np.ndarray,
    color_accum: np.ndarray,
    counts: np.ndarray,
    beta: float,
) -> np.ndarray:
    """Growth criterion: per-view-mean position gradient plus beta-scaled
    per-view-mean color gradient. Rows that never contributed score zero."""
    denom = np.maximum(counts, 1)
    return (pos_accum + beta * color_accum) / denom


def calibrate_mix_balance(pos_accum, color_accum, counts) -> float:
    """Balance factor that equates the channel medians over contributing
    Gaussians; 1.0 when either channel is degenerate."""
    mask = counts > 0
    if not np.any(mask):
        return 1.0
    mean_p = pos_accum[mask] / counts[mask]
    mean_c = color_accum[mask] / counts[mask]
    med_p = float(np.median(mean_p))
    med_c = float(np.median(mean_c))
    if med_p <= 0.0 or med_c <= 0.0:
        return 1.0
    return med_p / med_c
