import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from rgbtsplat.cloud import (
    Camera,
    covariance_backward,
    covariance_from_params,
    project_backward,
    project_gaussians,
    quat_to_rotmat,
    sh_backward,
    sh_evaluate,
    thermal_opacity,
    view_directions,
    view_directions_backward,
    _sh_basis,
)
from rgbtsplat.fd import central_diff, compare_grads


def rotmat_oracle(q):
    """Independent quaternion -> rotation matrix, written out longhand."""
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def identity_camera(fx=100.0, fy=100.0, cx=32.0, cy=32.0, w=64, h=64, near=0.1, far=50.0):
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, width=w, height=h,
                  world_to_cam=np.eye(4), near=near, far=far)


class TestCovariance:
    def test_identity(self):
        sigma = covariance_from_params(np.zeros((1, 3)), np.array([[1.0, 0, 0, 0]]))
        np.testing.assert_allclose(sigma[0], np.eye(3), atol=1e-15)

    def test_axis_scale(self):
        ls = np.array([[np.log(2.0), 0.0, 0.0]])
        sigma = covariance_from_params(ls, np.array([[1.0, 0, 0, 0]]))
        np.testing.assert_allclose(sigma[0], np.diag([4.0, 1.0, 1.0]), atol=1e-14)

    def test_rotated_scale_matches_oracle(self):
        # 90 degrees about z swaps the x/y axes of the scale
        q = np.array([np.cos(np.pi / 4), 0.0, 0.0, np.sin(np.pi / 4)])
        ls = np.array([np.log(2.0), 0.0, 0.0])
        R = rotmat_oracle(q)
        S = np.diag(np.exp(ls))
        expected = R @ S @ S.T @ R.T
        np.testing.assert_allclose(expected, np.diag([1.0, 4.0, 1.0]), atol=1e-12)
        sigma = covariance_from_params(ls[None], q[None])
        np.testing.assert_allclose(sigma[0], expected, atol=1e-12)

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_symmetric_psd(self, seed):
        rng = np.random.default_rng(seed)
        ls = rng.normal(0, 1, (4, 3))
        q = rng.normal(0, 1, (4, 4))
        q[np.linalg.norm(q, axis=1) < 1e-6] = [1, 0, 0, 0]
        sigma = covariance_from_params(ls, q)
        np.testing.assert_allclose(sigma, np.swapaxes(sigma, 1, 2), atol=1e-12)
        eig = np.linalg.eigvalsh(sigma)
        assert eig.min() >= -1e-10

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(3)
        ls = rng.normal(0, 0.5, (3, 3))
        q = rng.normal(0, 1, (3, 4))
        w = rng.normal(0, 1, (3, 3, 3))  # random upstream gradient

        def loss():
            return float(np.sum(w * covariance_from_params(ls, q)))

        d_ls, d_q = covariance_backward(ls, q, w)
        fd_ls = central_diff(loss, ls)
        fd_q = central_diff(loss, q)
        assert compare_grads("d_log_scales", d_ls, fd_ls, 1e-5).passed
        assert compare_grads("d_rotations", d_q, fd_q, 1e-5).passed

    def test_rotmat_matches_oracle(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            q = rng.normal(0, 1, 4)
            np.testing.assert_allclose(quat_to_rotmat(q[None])[0], rotmat_oracle(q), atol=1e-12)


class TestThermalOpacity:
    def test_zero_offset_is_base(self):
        assert thermal_opacity(0.7, 0.0) == expit(0.7)

    def test_midpoint(self):
        assert thermal_opacity(0.0, 0.0) == 0.5

    def test_positive_offset(self):
        # frozen from expit(4.0)
        assert thermal_opacity(0.0, 4.0) == pytest.approx(0.9820137900379085, abs=1e-12)

    @given(st.floats(-30, 30), st.floats(-12, 12))
    @settings(max_examples=200, deadline=None)
    def test_zero_offset_identity(self, logit, delta):
        assert thermal_opacity(logit, 0.0) == expit(logit)

    @given(st.floats(-12, 12), st.floats(-12, 12))
    @settings(max_examples=200, deadline=None)
    def test_strictly_monotone_in_offset(self, logit, delta):
        # strict within the range where float64 sigmoid still resolves steps
        lo = thermal_opacity(logit, delta)
        hi = thermal_opacity(logit, delta + 0.5)
        assert hi > lo


class TestProjection:
    def test_on_axis_point(self):
        cam = identity_camera()
        proj = project_gaussians(np.array([[0.0, 0.0, 2.0]]),
                                 np.eye(3)[None] * 0.01, cam)
        assert proj.valid[0]
        np.testing.assert_allclose(proj.mean2d[0], [32.0, 32.0], atol=1e-12)
        assert proj.depth[0] == pytest.approx(2.0)

    def test_axis_aligned_cov(self):
        # on the optical axis at z=1 the Jacobian is diag(f, f) so
        # cov2d = f^2 sigma^2 I plus the low-pass floor
        f, sig, lp = 100.0, 0.03, 0.3
        cam = identity_camera(fx=f, fy=f)
        proj = project_gaussians(np.array([[0.0, 0.0, 1.0]]),
                                 np.eye(3)[None] * sig ** 2, cam, lowpass=lp)
        np.testing.assert_allclose(proj.cov2d[0], np.eye(2) * (f * f * sig * sig + lp),
                                   rtol=1e-12)
        np.testing.assert_allclose(proj.conic[0] @ proj.cov2d[0], np.eye(2), atol=1e-9)

    def test_near_far_culling(self):
        cam = identity_camera(near=0.5, far=10.0)
        pos = np.array([[0.0, 0.0, 0.2], [0.0, 0.0, 20.0], [0.0, 0.0, 2.0]])
        proj = project_gaussians(pos, np.tile(np.eye(3) * 1e-4, (3, 1, 1)), cam)
        np.testing.assert_array_equal(proj.valid, [False, False, True])

    def test_offscreen_culling(self):
        cam = identity_camera()
        # projects far outside the expanded image rectangle
        pos = np.array([[50.0, 0.0, 1.0]])
        proj = project_gaussians(pos, np.eye(3)[None] * 1e-4, cam)
        assert not proj.valid[0]

    def test_rotation_consistency(self):
        # rotating the world and un-rotating the camera changes nothing
        rng = np.random.default_rng(11)
        q = rng.normal(0, 1, 4)
        Q = rotmat_oracle(q)
        pos = rng.normal(0, 0.3, (5, 3)) + [0, 0, 3.0]
        cov = covariance_from_params(rng.normal(-2, 0.3, (5, 3)), rng.normal(0, 1, (5, 4)))
        cam = identity_camera()
        base = project_gaussians(pos, cov, cam)

        w2c = np.eye(4)
        w2c[:3, :3] = Q.T  # world' = Q world  =>  cam = w2c' world' with w2c' = w2c Q^-1
        cam_rot = Camera(fx=cam.fx, fy=cam.fy, cx=cam.cx, cy=cam.cy,
                         width=cam.width, height=cam.height, world_to_cam=w2c,
                         near=cam.near, far=cam.far)
        rotated = project_gaussians(pos @ Q.T, Q[None] @ cov @ Q.T[None], cam_rot)
        np.testing.assert_allclose(rotated.mean2d, base.mean2d, atol=1e-9)
        np.testing.assert_allclose(rotated.cov2d, base.cov2d, atol=1e-9)
        np.testing.assert_allclose(rotated.depth, base.depth, atol=1e-10)

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(5)
        n = 4
        pos = rng.normal(0, 0.4, (n, 3)) + [0, 0, 3.0]
        ls = rng.normal(-2, 0.3, (n, 3))
        quat = rng.normal(0, 1, (n, 4))
        cam = identity_camera()
        wm = rng.normal(0, 1, (n, 2))
        wc = rng.normal(0, 1, (n, 2, 2))

        def loss():
            cov = covariance_from_params(ls, quat)
            proj = project_gaussians(pos, cov, cam)
            return float(np.sum(wm * proj.mean2d) + np.sum(wc * proj.cov2d))

        cov = covariance_from_params(ls, quat)
        proj = project_gaussians(pos, cov, cam)
        d_pos, d_sigma = project_backward(pos, cov, cam, proj, wm, wc)
        d_ls, d_q = covariance_backward(ls, quat, d_sigma)
        assert compare_grads("d_positions", d_pos, central_diff(loss, pos), 1e-5).passed
        assert compare_grads("d_log_scales", d_ls, central_diff(loss, ls), 1e-5).passed
        assert compare_grads("d_rotations", d_q, central_diff(loss, quat), 1e-5).passed


class TestSphericalHarmonics:
    def test_dc_term(self):
        y00 = 0.28209479177387814
        coeffs = np.zeros((1, 1, 3))
        coeffs[0, 0, 0] = 0.5 / y00
        out = sh_evaluate(coeffs, np.array([[0.0, 0.0, 1.0]]))
        np.testing.assert_allclose(out[0], [1.0, 0.5, 0.5], atol=1e-12)

    def test_zero_coeffs_give_shift(self):
        out = sh_evaluate(np.zeros((1, 16, 3)), np.array([[0.0, 1.0, 0.0]]))
        np.testing.assert_allclose(out[0], [0.5, 0.5, 0.5], atol=1e-15)

    def test_degree1_y_antisymmetry(self):
        # only the (1,-1) coefficient set: outputs at +y/-y mirror about 0.5
        coeffs = np.zeros((2, 4, 3))
        coeffs[:, 1, :] = 0.3
        dirs = np.array([[0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
        out = sh_evaluate(coeffs, dirs)
        basis_val = 0.4886025119029199 * 0.3
        np.testing.assert_allclose(out[0], 0.5 - basis_val, atol=1e-12)
        np.testing.assert_allclose(out[1], 0.5 + basis_val, atol=1e-12)
        np.testing.assert_allclose(out[0] + out[1], np.full(3, 1.0), atol=1e-12)

    def test_basis_matches_scipy_norms(self):
        # |Y_lm| integrates to 1 over the sphere; spot-check the DC value
        assert _sh_basis(0, np.array([[1.0, 0, 0]]))[0, 0] == pytest.approx(
            1.0 / (2.0 * np.sqrt(np.pi)))

    def test_backward_matches_fd(self):
        rng = np.random.default_rng(9)
        n = 3
        coeffs = rng.normal(0, 0.4, (n, 16, 3))
        pos = rng.normal(0, 1, (n, 3)) + [0, 0, 4.0]
        center = np.array([0.1, -0.2, 0.0])
        w = rng.normal(0, 1, (n, 3))

        def loss():
            dirs, _ = view_directions(pos, center)
            return float(np.sum(w * sh_evaluate(coeffs, dirs, degree=3)))

        dirs, norms = view_directions(pos, center)
        d_sh, d_dirs = sh_backward(coeffs, dirs, w, degree=3)
        d_pos = view_directions_backward(dirs, norms, d_dirs)
        assert compare_grads("d_sh", d_sh, central_diff(loss, coeffs), 1e-5).passed
        assert compare_grads("d_pos", d_pos, central_diff(loss, pos), 1e-5).passed

    def test_inactive_degree_zero_grad(self):
        coeffs = np.random.default_rng(0).normal(0, 1, (2, 16, 3))
        dirs = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        d_sh, _ = sh_backward(coeffs, dirs, np.ones((2, 3)), degree=1)
        assert np.all(d_sh[:, 4:, :] == 0)


class TestCamera:
    def test_validate_rejects_skewed(self):
        m = np.eye(4)
        m[0, 1] = 1e-3
        cam = Camera(fx=1, fy=1, cx=0, cy=0, width=8, height=8, world_to_cam=m)
        with pytest.raises(ValueError):
            cam.validate()

    def test_center_roundtrip(self):
        rng = np.random.default_rng(2)
        q = rng.normal(0, 1, 4)
        R = rotmat_oracle(q)
        c = rng.normal(0, 2, 3)
        w2c = np.eye(4)
        w2c[:3, :3] = R
        w2c[:3, 3] = -R @ c
        cam = Camera(fx=1, fy=1, cx=0, cy=0, width=8, height=8, world_to_cam=w2c)
        cam.validate()
        np.testing.assert_allclose(cam.center, c, atol=1e-12)
