"""Primitive math shared by every stage: quaternion/covariance algebra, the
pinhole camera model, perspective projection of anisotropic Gaussians onto the
image plane, spherical-harmonics color evaluation, and the alpha law.

Everything here is a pure function over numpy arrays. Batched variants
(leading N axis) are the workhorses; scalar wrappers exist for tests and
fixtures. No function mutates its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Low-pass dilation added to the projected covariance diagonal before
# inversion (px^2). Keeps sub-pixel splats invertible.
COV2D_DILATION = 0.3

# Alpha ceiling: keeps transmittance strictly positive so logs and the
# backward pass stay finite.
ALPHA_MAX = 0.99

DEFAULT_NEAR = 0.01

# Real SH basis constants (degree 0..3), community splatting sign convention.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def sh_coeff_count(degree: int) -> int:
    if not 0 <= degree <= 3:
        raise ValueError(f"SH degree must be in [0, 3], got {degree}")
    return (degree + 1) ** 2


def normalize_quaternions(q: np.ndarray) -> np.ndarray:
    """Return unit quaternions; zero-norm input is replaced by identity."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    out = np.divide(q, norm, out=np.zeros_like(q), where=norm > 0)
    bad = (norm <= 0).reshape(out.shape[:-1])
    if np.any(bad):
        out[bad] = (1.0, 0.0, 0.0, 0.0)
    return out


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternion(s) (w, x, y, z) -> rotation matrix/matrices (..., 3, 3).

    Input is renormalized, so drifted quaternions are safe.
    """
    q = normalize_quaternions(q)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def build_covariance(q: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """World-space covariance R S S^T R^T with S = diag(exp(log_scale)).

    Accepts a single (4,), (3,) pair or batches (..., 4), (..., 3). The result
    is symmetric PSD by construction.
    """
    R = quat_to_rotmat(q)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    N = R * s[..., None, :]  # R @ diag(s)
    return N @ np.swapaxes(N, -1, -2)


@dataclass
class Gaussian:
    """A single primitive; convenience container for fixtures and tests."""

    position: np.ndarray  # (3,)
    rotation: np.ndarray  # (4,) quaternion, (w, x, y, z)
    log_scale: np.ndarray  # (3,)
    opacity_logit: float
    sh: np.ndarray  # (3, K) channel-major SH coefficients

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return build_covariance(self.rotation, self.log_scale)


@dataclass
class Camera:
    """Pinhole camera: view = R @ world + t, pixels x = fx*vx/vz + cx etc.

    Pixel (row i, col j) samples the continuous image plane at
    (j + 0.5, i + 0.5).
    """

    R: np.ndarray  # (3, 3) world -> view rotation
    t: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    cam_id: int = 0
    image_path: str | None = None
    split: str = "train"

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)

    def validate(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"camera {self.cam_id}: focal lengths must be positive")
        if not (self.width >= 1 and self.height >= 1):
            raise ValueError(f"camera {self.cam_id}: image size must be >= 1")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise ValueError(f"camera {self.cam_id}: rotation block is not orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.R.T @ self.t

    def world_to_view(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t

    def pixel_rays(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        """View-space ray directions (k, 3) through continuous pixel coords."""
        xs = np.asarray(xs, dtype=np.float64)
        ys = np.asarray(ys, dtype=np.float64)
        return np.stack(
            [(xs - self.cx) / self.fx, (ys - self.cy) / self.fy, np.ones_like(xs)],
            axis=-1,
        )

    def backproject(self, xs, ys, depths) -> np.ndarray:
        """World points at view depth `depths` along pixel rays."""
        rays = self.pixel_rays(xs, ys)
        view = rays * np.asarray(depths, dtype=np.float64)[..., None]
        return (view - self.t) @ self.R

    def to_dict(self) -> dict:
        m = np.eye(4)
        m[:3, :3] = self.R
        m[:3, 3] = self.t
        return {
            "id": int(self.cam_id),
            "image": self.image_path,
            "width": int(self.width),
            "height": int(self.height),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "world_to_view": m.tolist(),
            "split": self.split,
        }


def look_at_camera(
    eye, target, width, height, focal, cam_id=0, up=(0.0, 1.0, 0.0), split="train"
) -> Camera:
    """Camera at `eye` looking toward `target` (z forward, proper rotation)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd = fwd / np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    x = np.cross(up, fwd)
    if np.linalg.norm(x) < 1e-9:  # looking straight along up
        x = np.cross((1.0, 0.0, 0.0), fwd)
    x = x / np.linalg.norm(x)
    y = np.cross(fwd, x)
    R = np.stack([x, y, fwd])
    return Camera(
        R=R,
        t=-R @ eye,
        fx=float(focal),
        fy=float(focal),
        cx=width / 2.0,
        cy=height / 2.0,
        width=int(width),
        height=int(height),
        cam_id=cam_id,
        split=split,
    )


@dataclass
class Projected2D:
    """A single Gaussian's screen-space footprint (scalar form)."""

    mean2d: np.ndarray  # (2,) pixels
    cov2d: np.ndarray  # (3,) packed symmetric (a, b, c) = [[a, b], [b, c]], dilated
    conic: np.ndarray  # (3,) packed inverse of cov2d
    depth: float  # view-space z
    radius: int  # pixel extent for binning


@dataclass
class ProjectionBatch:
    """Screen-space projection of every Gaussian in a set against one camera.

    Arrays are full length N; entries where ``visible`` is False are
    culled (behind the near plane or footprint off-screen) and hold junk.
    """

    visible: np.ndarray  # (N,) bool
    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 3) packed (a, b, c), dilation included
    conic: np.ndarray  # (N, 3)
    depth: np.ndarray  # (N,)
    radius: np.ndarray  # (N,) int32, 3 sigma of the larger eigenvalue
    radii: np.ndarray = field(default=None, repr=False)  # (N, 2) per-axis 3 sigma
    view_pos: np.ndarray = field(default=None, repr=False)  # (N, 3) cached


def project_gaussians(
    positions: np.ndarray,
    rotations: np.ndarray,
    log_scales: np.ndarray,
    cam: Camera,
    near: float = DEFAULT_NEAR,
    dilation: float = COV2D_DILATION,
) -> ProjectionBatch:
    """EWA-style perspective projection of N Gaussians.

    cov2d = J W Sigma W^T J^T with J the Jacobian of the pinhole projection at
    the mean, plus `dilation` on the diagonal. Culls Gaussians behind the near
    plane and those whose 3-sigma box misses the image.
    """
    positions = np.asarray(positions, dtype=np.float64)
    n = positions.shape[0]
    out = ProjectionBatch(
        visible=np.zeros(n, dtype=bool),
        mean2d=np.zeros((n, 2)),
        cov2d=np.zeros((n, 3)),
        conic=np.zeros((n, 3)),
        depth=np.zeros(n),
        radius=np.zeros(n, dtype=np.int32),
        radii=np.zeros((n, 2)),
        view_pos=np.zeros((n, 3)),
    )
    if n == 0:
        return out

    v = positions @ cam.R.T + cam.t
    tz = v[:, 2]
    in_front = tz > near
    out.view_pos = v
    out.depth = tz

    # Work only on the in-front subset; everything else stays culled.
    idx = np.flatnonzero(in_front)
    if idx.size == 0:
        return out
    vx, vy, vz = v[idx, 0], v[idx, 1], v[idx, 2]
    inv_z = 1.0 / vz

    mx = cam.fx * vx * inv_z + cam.cx
    my = cam.fy * vy * inv_z + cam.cy
    out.mean2d[idx, 0] = mx
    out.mean2d[idx, 1] = my

    cov3d = build_covariance(rotations[idx], log_scales[idx])
    # T = J @ R, built row-wise to avoid materializing J.
    inv_z2 = inv_z * inv_z
    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * vx * inv_z2
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * vy * inv_z2
    T = J @ cam.R
    cov2d_m = T @ cov3d @ np.swapaxes(T, -1, -2)
    a = cov2d_m[:, 0, 0] + dilation
    b = cov2d_m[:, 0, 1]
    c = cov2d_m[:, 1, 1] + dilation

    det = a * c - b * b
    # PSD world covariance + positive dilation makes det > 0; guard anyway.
    ok = det > 0
    inv_det = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    out.cov2d[idx, 0] = a
    out.cov2d[idx, 1] = b
    out.cov2d[idx, 2] = c
    out.conic[idx, 0] = c * inv_det
    out.conic[idx, 1] = -b * inv_det
    out.conic[idx, 2] = a * inv_det

    # Cull radius: 3 sigma of the larger eigenvalue, ceil'd to whole pixels.
    # The rasterizers use the tighter per-axis extents of the same 3-sigma
    # ellipse (3*sqrt(a), 3*sqrt(c)) as the support box.
    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = np.ceil(3.0 * np.sqrt(lam_max))
    out.radius[idx] = radius.astype(np.int32)
    rx = 3.0 * np.sqrt(a)
    ry = 3.0 * np.sqrt(c)
    out.radii[idx, 0] = rx
    out.radii[idx, 1] = ry

    on_screen = (
        (mx + rx > 0)
        & (mx - rx < cam.width)
        & (my + ry > 0)
        & (my - ry < cam.height)
    )
    out.visible[idx] = ok & on_screen
    return out


def footprint_bounds(mean2d: np.ndarray, radius: np.ndarray, width: int, height: int):
    """Integer pixel-index bounds (half-open) of the splat footprint box.

    `radius` is either a scalar per Gaussian (square box) or per-axis (..., 2)
    half-extents. Pixel (iy, ix) is inside iff its center (ix + 0.5, iy + 0.5)
    lies within the box around the mean. Both renderers share this helper so
    they agree on the exact support of every splat.
    """
    mean2d = np.asarray(mean2d, dtype=np.float64)
    r = np.asarray(radius, dtype=np.float64)
    if r.ndim == mean2d.ndim:
        rx, ry = r[..., 0], r[..., 1]
    else:
        rx = ry = r
    x0 = np.maximum(np.ceil(mean2d[..., 0] - rx - 0.5), 0).astype(np.int64)
    x1 = np.minimum(np.floor(mean2d[..., 0] + rx - 0.5) + 1, width).astype(np.int64)
    y0 = np.maximum(np.ceil(mean2d[..., 1] - ry - 0.5), 0).astype(np.int64)
    y1 = np.minimum(np.floor(mean2d[..., 1] + ry - 0.5) + 1, height).astype(np.int64)
    return x0, x1, y0, y1


def project_gaussian(g: Gaussian, cam: Camera, near: float = DEFAULT_NEAR) -> Projected2D | None:
    """Single-Gaussian projection; returns None when culled."""
    batch = project_gaussians(
        g.position[None], np.asarray(g.rotation)[None], np.asarray(g.log_scale)[None], cam, near=near
    )
    if not batch.visible[0]:
        return None
    return Projected2D(
        mean2d=batch.mean2d[0],
        cov2d=batch.cov2d[0],
        conic=batch.conic[0],
        depth=float(batch.depth[0]),
        radius=int(batch.radius[0]),
    )


def eval_alpha(p2d: Projected2D, opacity: float, x: np.ndarray, alpha_max: float = ALPHA_MAX) -> float:
    """Alpha of one projected Gaussian at continuous pixel position(s) x."""
    x = np.asarray(x, dtype=np.float64)
    d = x - p2d.mean2d
    A00, A01, A11 = p2d.conic
    power = -0.5 * (A00 * d[..., 0] ** 2 + A11 * d[..., 1] ** 2) - A01 * d[..., 0] * d[..., 1]
    return np.minimum(alpha_max, opacity * np.exp(power))


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """SH basis values (M, K) at unit directions, sign convention folded in.

    Color is 0.5 + sh @ basis per channel; the degree-0 column is the constant
    SH_C0.
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    M = dirs.shape[0]
    K = sh_coeff_count(degree)
    B = np.empty((M, K))
    B[:, 0] = SH_C0
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = SH_C2[0] * x * y
        B[:, 5] = SH_C2[1] * y * z
        B[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * x * z
        B[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        B[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        B[:, 10] = SH_C3[1] * x * y * z
        B[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        B[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return B


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(dir): (M, K, 3), same convention as sh_basis."""
    dirs = np.asarray(dirs, dtype=np.float64)
    M = dirs.shape[0]
    K = sh_coeff_count(degree)
    G = np.zeros((M, K, 3))
    if degree >= 1:
        x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
        G[:, 1, 1] = -SH_C1
        G[:, 2, 2] = SH_C1
        G[:, 3, 0] = -SH_C1
    if degree >= 2:
        G[:, 4, 0] = SH_C2[0] * y
        G[:, 4, 1] = SH_C2[0] * x
        G[:, 5, 1] = SH_C2[1] * z
        G[:, 5, 2] = SH_C2[1] * y
        G[:, 6, 0] = SH_C2[2] * (-2.0 * x)
        G[:, 6, 1] = SH_C2[2] * (-2.0 * y)
        G[:, 6, 2] = SH_C2[2] * (4.0 * z)
        G[:, 7, 0] = SH_C2[3] * z
        G[:, 7, 2] = SH_C2[3] * x
        G[:, 8, 0] = SH_C2[4] * (2.0 * x)
        G[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        G[:, 9, 0] = SH_C3[0] * 6.0 * x * y
        G[:, 9, 1] = SH_C3[0] * (3.0 * x * x - 3.0 * y * y)
        G[:, 10, 0] = SH_C3[1] * y * z
        G[:, 10, 1] = SH_C3[1] * x * z
        G[:, 10, 2] = SH_C3[1] * x * y
        G[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
        G[:, 11, 1] = SH_C3[2] * (4.0 * z * z - x * x - 3.0 * y * y)
        G[:, 11, 2] = SH_C3[2] * (8.0 * y * z)
        G[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
        G[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
        G[:, 12, 2] = SH_C3[3] * (6.0 * z * z - 3.0 * x * x - 3.0 * y * y)
        G[:, 13, 0] = SH_C3[4] * (4.0 * z * z - 3.0 * x * x - y * y)
        G[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
        G[:, 13, 2] = SH_C3[4] * (8.0 * x * z)
        G[:, 14, 0] = SH_C3[5] * (2.0 * x * z)
        G[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
        G[:, 14, 2] = SH_C3[5] * (x * x - y * y)
        G[:, 15, 0] = SH_C3[6] * (3.0 * x * x - 3.0 * y * y)
        G[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return G


def eval_sh_color(sh: np.ndarray, view_dirs: np.ndarray, clamp: bool = True) -> np.ndarray:
    """View-dependent RGB from SH coefficients.

    sh is (..., 3, K); view_dirs is unit (..., 3). Color is
    0.5 + sum_k sh[..., k] * basis_k, clamped at 0 for rendering.
    """
    sh = np.asarray(sh, dtype=np.float64)
    single = sh.ndim == 2
    if single:
        sh = sh[None]
        view_dirs = np.asarray(view_dirs, dtype=np.float64)[None]
    K = sh.shape[-1]
    degree = int(round(np.sqrt(K))) - 1
    B = sh_basis(view_dirs, degree)
    colors = 0.5 + np.einsum("nck,nk->nc", sh, B)
    if clamp:
        colors = np.maximum(colors, 0.0)
    return colors[0] if single else colors


def dc_from_rgb(rgb: np.ndarray) -> np.ndarray:
    """DC coefficient that renders exactly `rgb` under the 0.5 offset."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / SH_C0


def rgb_from_dc(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * SH_C0 + 0.5


def inverse_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.log(x / (1.0 - x))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
