import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from budgetsplat.core_math import (
    Camera,
    Gaussian,
    build_covariance,
    dc_from_rgb,
    eval_alpha,
    eval_sh_color,
    inverse_sigmoid,
    look_at_camera,
    project_gaussian,
    project_gaussians,
    quat_to_rotmat,
    sh_basis,
    sh_basis_grad,
)


def make_gaussian(position=(0, 0, 0), rotation=(1, 0, 0, 0), log_scale=(0, 0, 0),
                  opacity=0.5, rgb=(0.5, 0.5, 0.5), sh_degree=0):
    K = (sh_degree + 1) ** 2
    sh = np.zeros((3, K))
    sh[:, 0] = dc_from_rgb(np.asarray(rgb, dtype=np.float64))
    return Gaussian(
        position=np.asarray(position, dtype=np.float64),
        rotation=np.asarray(rotation, dtype=np.float64),
        log_scale=np.asarray(log_scale, dtype=np.float64),
        opacity_logit=float(inverse_sigmoid(opacity)),
        sh=sh,
    )


class TestBuildCovariance:
    def test_identity(self):
        cov = build_covariance(np.array([1.0, 0, 0, 0]), np.zeros(3))
        np.testing.assert_allclose(cov, np.eye(3), atol=1e-15)

    def test_anisotropic_scale(self):
        cov = build_covariance(np.array([1.0, 0, 0, 0]), np.array([np.log(2.0), 0, 0]))
        np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_eigenvalues_match_scales(self, rng):
        # Oracle: the spectrum of R S S^T R^T is exp(2 * log_scale).
        for _ in range(50):
            q = rng.normal(size=4)
            s = rng.uniform(-2, 1, 3)
            cov = build_covariance(q, s)
            eig = np.sort(np.linalg.eigvalsh(cov))
            np.testing.assert_allclose(eig, np.sort(np.exp(2 * s)), rtol=1e-9)

    def test_symmetric(self, rng):
        q = rng.normal(size=(20, 4))
        s = rng.uniform(-2, 1, (20, 3))
        cov = build_covariance(q, s)
        assert np.max(np.abs(cov - np.swapaxes(cov, -1, -2))) < 1e-12

    def test_spectrum_rotation_invariant(self, rng):
        # 1000 random (q, s) pairs: eigenvalues depend only on log_scale.
        q = rng.normal(size=(1000, 4))
        s = rng.uniform(-2, 1, (1000, 3))
        cov = build_covariance(q, s)
        eig = np.sort(np.linalg.eigvalsh(cov), axis=1)
        np.testing.assert_allclose(eig, np.sort(np.exp(2 * s), axis=1), rtol=1e-9, atol=1e-9)

    def test_drifted_quaternion_renormalized(self):
        cov_unit = build_covariance(np.array([1.0, 0, 0, 0]), np.zeros(3))
        cov_drift = build_covariance(np.array([7.3, 0, 0, 0]), np.zeros(3))
        np.testing.assert_allclose(cov_unit, cov_drift, atol=1e-12)


class TestQuaternions:
    def test_rotation_orthonormal(self, rng):
        R = quat_to_rotmat(rng.normal(size=(64, 4)))
        eye = R @ np.swapaxes(R, -1, -2)
        np.testing.assert_allclose(eye, np.broadcast_to(np.eye(3), eye.shape), atol=1e-12)
        np.testing.assert_allclose(np.linalg.det(R), 1.0, atol=1e-12)


class TestCamera:
    def test_validate_rejects_bad_focal(self):
        cam = Camera(R=np.eye(3), t=np.zeros(3), fx=-1, fy=1, cx=1, cy=1, width=4, height=4)
        with pytest.raises(ValueError):
            cam.validate()

    def test_validate_rejects_skewed_rotation(self):
        R = np.eye(3)
        R[0, 1] = 0.1
        cam = Camera(R=R, t=np.zeros(3), fx=10, fy=10, cx=2, cy=2, width=4, height=4)
        with pytest.raises(ValueError):
            cam.validate()

    def test_center_roundtrip(self):
        cam = look_at_camera(eye=(1.0, 2.0, -3.0), target=(0, 0, 0), width=8, height=8, focal=8)
        np.testing.assert_allclose(cam.center, (1.0, 2.0, -3.0), atol=1e-12)
        # The target projects onto the optical axis.
        v = cam.world_to_view(np.zeros(3))
        np.testing.assert_allclose(v[:2], 0.0, atol=1e-12)
        assert v[2] > 0

    def test_backproject_inverts_projection(self, rng):
        cam = look_at_camera(eye=(0.3, -0.2, -2.0), target=(0, 0, 0), width=32, height=32, focal=30)
        pts = rng.uniform(-0.5, 0.5, (10, 3))
        v = cam.world_to_view(pts)
        xs = cam.fx * v[:, 0] / v[:, 2] + cam.cx
        ys = cam.fy * v[:, 1] / v[:, 2] + cam.cy
        back = cam.backproject(xs, ys, v[:, 2])
        np.testing.assert_allclose(back, pts, atol=1e-10)


class TestProjection:
    def cam(self, width=32, height=32, focal=20.0):
        return Camera(R=np.eye(3), t=np.array([0.0, 0.0, 2.0]), fx=focal, fy=focal,
                      cx=width / 2, cy=height / 2, width=width, height=height)

    def test_on_axis_closed_form(self):
        # Isotropic sigma^2 I at depth z on the optical axis:
        # cov2d = sigma^2 diag(fx^2, fy^2) / z^2 + dilation.
        sigma = 0.13
        cam = self.cam()
        g = make_gaussian(position=(0, 0, 0), log_scale=np.log(sigma) * np.ones(3))
        p = project_gaussian(g, cam)
        z = 2.0
        expected = sigma**2 * cam.fx**2 / z**2 + 0.3
        np.testing.assert_allclose(p.mean2d, (cam.cx, cam.cy), atol=1e-12)
        np.testing.assert_allclose(p.cov2d[0], expected, rtol=1e-12)
        np.testing.assert_allclose(p.cov2d[2], expected, rtol=1e-12)
        np.testing.assert_allclose(p.cov2d[1], 0.0, atol=1e-12)
        assert p.depth == pytest.approx(z)

    def test_jacobian_matches_numeric(self, rng):
        # The EWA linearization at the mean: compare cov2d against the
        # numerically propagated covariance J Sigma J^T for a tiny Gaussian.
        cam = look_at_camera(eye=(0.4, -0.3, -2.2), target=(0, 0, 0), width=48, height=48, focal=40)
        pos = rng.uniform(-0.3, 0.3, 3)
        g = make_gaussian(position=pos, rotation=rng.normal(size=4),
                          log_scale=rng.uniform(-3.2, -2.8, 3))
        p = project_gaussian(g, cam)

        def proj(x):
            v = cam.world_to_view(x)
            return np.array([cam.fx * v[0] / v[2] + cam.cx, cam.fy * v[1] / v[2] + cam.cy])

        h = 1e-6
        J = np.zeros((2, 3))
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            J[:, a] = (proj(pos + e) - proj(pos - e)) / (2 * h)
        num = J @ g.covariance() @ J.T
        packed = np.array([num[0, 0] + 0.3, num[0, 1], num[1, 1] + 0.3])
        np.testing.assert_allclose(p.cov2d, packed, rtol=1e-4)

    def test_behind_camera_culled(self):
        cam = self.cam()
        g = make_gaussian(position=(0, 0, -5.0))
        assert project_gaussian(g, cam) is None

    def test_offscreen_culled(self):
        cam = self.cam()
        g = make_gaussian(position=(50.0, 0, 0), log_scale=np.log(0.01) * np.ones(3))
        assert project_gaussian(g, cam) is None

    def test_random_sweep_positive_definite(self, rng):
        # 1000 random inputs: projected cov2d symmetric positive definite.
        n = 1000
        pos = rng.uniform(-1, 1, (n, 3))
        q = rng.normal(size=(n, 4))
        s = np.log(rng.uniform(0.01, 0.5, (n, 3)))
        cam = look_at_camera(eye=(0, 0.5, -3.0), target=(0, 0, 0), width=64, height=64, focal=55)
        proj = project_gaussians(pos, q, s, cam)
        vis = proj.visible
        assert vis.sum() > 500
        a, b, c = proj.cov2d[vis, 0], proj.cov2d[vis, 1], proj.cov2d[vis, 2]
        assert np.all(a > 0) and np.all(c > 0)
        assert np.all(a * c - b * b > 0)
        assert np.all(proj.radius[vis] >= 1)

    def test_principal_point_shift_property(self, rng):
        # Shifting (cx, cy) by (delta, 0) shifts mean2d by exactly (delta, 0)
        # and leaves cov2d unchanged.
        n = 200
        pos = rng.uniform(-1, 1, (n, 3))
        q = rng.normal(size=(n, 4))
        s = np.log(rng.uniform(0.02, 0.4, (n, 3)))
        base = look_at_camera(eye=(0, 0, -3.0), target=(0, 0, 0), width=64, height=64, focal=50)
        shifted = Camera(R=base.R, t=base.t, fx=base.fx, fy=base.fy, cx=base.cx + 3.5,
                         cy=base.cy, width=base.width, height=base.height)
        p0 = project_gaussians(pos, q, s, base)
        p1 = project_gaussians(pos, q, s, shifted)
        both = p0.visible & p1.visible
        assert both.sum() > 100
        np.testing.assert_allclose(p1.mean2d[both, 0] - p0.mean2d[both, 0], 3.5, atol=1e-10)
        np.testing.assert_allclose(p1.mean2d[both, 1], p0.mean2d[both, 1], atol=1e-10)
        np.testing.assert_allclose(p1.cov2d[both], p0.cov2d[both], atol=1e-10)


class TestAlpha:
    def projected(self, mean=(4.0, 4.0), cov=(2.0, 0.0, 1.5)):
        from budgetsplat.core_math import Projected2D

        a, b, c = cov
        det = a * c - b * b
        conic = np.array([c / det, -b / det, a / det])
        return Projected2D(mean2d=np.asarray(mean, dtype=np.float64),
                           cov2d=np.asarray(cov, dtype=np.float64),
                           conic=conic, depth=1.0, radius=5)

    def test_alpha_at_center(self):
        p = self.projected()
        assert eval_alpha(p, 0.7, np.array([4.0, 4.0])) == pytest.approx(0.7, abs=1e-15)

    def test_alpha_at_mahalanobis_sqrt2(self):
        # Isotropic unit conic: x at Euclidean distance sqrt(2) has
        # Mahalanobis^2 = 2, alpha = min(alpha_max, e^-1).
        p = self.projected(cov=(1.0, 0.0, 1.0))
        x = np.array([4.0 + np.sqrt(2.0), 4.0])
        assert eval_alpha(p, 1.0, x) == pytest.approx(np.exp(-1.0), rel=1e-12)

    def test_zero_opacity(self, rng):
        p = self.projected()
        xs = rng.uniform(0, 8, (50, 2))
        assert np.all(eval_alpha(p, 0.0, xs) == 0.0)

    def test_alpha_clamped(self):
        p = self.projected(cov=(1.0, 0.0, 1.0))
        assert eval_alpha(p, 1.0, np.array([4.0, 4.0])) == pytest.approx(0.99)

    def test_monotone_in_mahalanobis(self, rng):
        p = self.projected(cov=(2.0, 0.7, 1.2))
        A = np.array([[p.conic[0], p.conic[1]], [p.conic[1], p.conic[2]]])
        for _ in range(100):
            d1 = rng.normal(size=2)
            d2 = rng.normal(size=2)
            m1 = d1 @ A @ d1
            m2 = d2 @ A @ d2
            a1 = eval_alpha(p, 0.8, p.mean2d + d1)
            a2 = eval_alpha(p, 0.8, p.mean2d + d2)
            if m1 < m2:
                assert a1 >= a2
            elif m2 < m1:
                assert a2 >= a1


class TestSphericalHarmonics:
    def test_degree0_view_independent(self, rng):
        g = make_gaussian(rgb=(0.3, 0.6, 0.9), sh_degree=0)
        dirs = rng.normal(size=(20, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        colors = eval_sh_color(np.broadcast_to(g.sh, (20, 3, 1)), dirs)
        np.testing.assert_allclose(colors, np.tile((0.3, 0.6, 0.9), (20, 1)), atol=1e-12)

    def test_zero_coefficients_give_offset(self):
        # The DC offset convention: raw basis sum is 0, rendered color is the
        # 0.5 offset (clamped at 0).
        sh = np.zeros((3, 4))
        color = eval_sh_color(sh, np.array([0.0, 0.0, 1.0]))
        np.testing.assert_allclose(color, 0.5, atol=1e-15)

    def test_degree1_matches_basis_table(self, rng):
        # Independent oracle: evaluate the degree-1 polynomials directly.
        C0 = 0.28209479177387814
        C1 = 0.4886025119029199
        sh = rng.normal(size=(1, 3, 4))
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        x, y, z = d
        expected = 0.5 + (sh[0, :, 0] * C0 - C1 * y * sh[0, :, 1]
                          + C1 * z * sh[0, :, 2] - C1 * x * sh[0, :, 3])
        got = eval_sh_color(sh, d[None], clamp=False)[0]
        np.testing.assert_allclose(got, expected, atol=1e-12)

    def test_clamped_at_zero(self):
        sh = np.zeros((3, 1))
        sh[:, 0] = dc_from_rgb(np.array([-2.0, 0.5, 0.5]))
        color = eval_sh_color(sh, np.array([0.0, 0.0, 1.0]))
        assert color[0] == 0.0
        assert color[1] == pytest.approx(0.5)

    @pytest.mark.parametrize("degree", [1, 2, 3])
    def test_basis_grad_matches_fd(self, degree, rng):
        d = rng.normal(size=(5, 3))
        h = 1e-6
        G = sh_basis_grad(d, degree)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            fd = (sh_basis(d + e, degree) - sh_basis(d - e, degree)) / (2 * h)
            np.testing.assert_allclose(G[:, :, a], fd, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(
    qw=st.floats(-2, 2), qx=st.floats(-2, 2), qy=st.floats(-2, 2), qz=st.floats(-2, 2),
    s0=st.floats(-2, 0.5), s1=st.floats(-2, 0.5), s2=st.floats(-2, 0.5),
)
def test_covariance_psd_property(qw, qx, qy, qz, s0, s1, s2):
    q = np.array([qw, qx, qy, qz])
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    cov = build_covariance(q, np.array([s0, s1, s2]))
    eig = np.linalg.eigvalsh(cov)
    assert np.all(eig >= -1e-12)
