"""Scene representation and per-Gaussian geometry/appearance math.

Everything here is batched over N Gaussians and written twice: a forward
map and a hand-derived backward map. The backward maps are exercised
against central finite differences in the test suite, so any change to a
forward must keep its adjoint in sync.

Conventions:
  * quaternions are (w, x, y, z) and may be unnormalized in storage; every
    consumer normalizes internally.
  * opacity is stored as a pre-sigmoid logit. The thermal branch adds a
    learnable per-Gaussian offset in that same logit space, so the thermal
    opacity is sigmoid(logit + offset) with no logit/sigmoid roundtrip.
  * cameras are pinhole, OpenCV-style: x right, y down, z forward;
    pixel = (fx * x/z + cx, fy * y/z + cy).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid

from .errors import ShapeMismatch

# screen-space low-pass floor added to every projected covariance (px^2);
# keeps splats at least ~half a pixel wide
DEFAULT_LOWPASS = 0.3

# 3-sigma bound, used both for tile binning and view culling
CONFIDENCE_SIGMAS = 3.0


@dataclass
class GaussianCloud:
    """Learnable per-Gaussian parameters.

    positions                (N,3) world-space centers
    log_scales               (N,3) log of per-axis scales
    rotations                (N,4) quaternions (w,x,y,z), renormalized after each optimizer step
    opacity_logits           (N,)  pre-sigmoid opacity
    thermal_opacity_offsets  (N,)  additive logit offset for the thermal pass
    sh_coeffs                (N,(deg+1)^2,3) spherical-harmonic RGB coefficients
    features                 (N,d) latent attribute vectors
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    thermal_opacity_offsets: np.ndarray
    sh_coeffs: np.ndarray
    features: np.ndarray

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh_coeffs.shape[1]))) - 1

    @property
    def dtype(self) -> np.dtype:
        return self.positions.dtype

    def validate(self) -> None:
        n = self.n
        if self.positions.shape != (n, 3):
            raise ShapeMismatch(f"positions must be (N,3), got {self.positions.shape}")
        if self.log_scales.shape != (n, 3):
            raise ShapeMismatch(f"log_scales must be (N,3), got {self.log_scales.shape}")
        if self.rotations.shape != (n, 4):
            raise ShapeMismatch(f"rotations must be (N,4), got {self.rotations.shape}")
        if self.opacity_logits.shape != (n,):
            raise ShapeMismatch(f"opacity_logits must be (N,), got {self.opacity_logits.shape}")
        if self.thermal_opacity_offsets.shape != (n,):
            raise ShapeMismatch("thermal_opacity_offsets must be (N,)")
        deg = self.sh_degree
        if self.sh_coeffs.shape != (n, (deg + 1) ** 2, 3):
            raise ShapeMismatch(f"sh_coeffs must be (N,(deg+1)^2,3), got {self.sh_coeffs.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ShapeMismatch(f"features must be (N,d), got {self.features.shape}")
        # unit quaternions up to dtype resolution (renormalized after each step)
        tol = 1e-9 if self.dtype == np.float64 else 1e-5
        norms = np.linalg.norm(self.rotations, axis=1)
        if not np.allclose(norms, 1.0, atol=tol, rtol=0):
            raise ValueError(f"rotations not unit length (max dev {np.abs(norms - 1).max():.2e})")
        for arr in (self.positions, self.log_scales, self.sh_coeffs, self.features,
                    self.opacity_logits, self.thermal_opacity_offsets):
            if not np.all(np.isfinite(arr)):
                raise ValueError("cloud contains non-finite values")

    def normalize_rotations(self) -> None:
        self.rotations /= np.linalg.norm(self.rotations, axis=1, keepdims=True)

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).astype(dtype) for f in _CLOUD_FIELDS))

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in _CLOUD_FIELDS))

    def named_params(self):
        return [(f, getattr(self, f)) for f in _CLOUD_FIELDS]


_CLOUD_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits",
                 "thermal_opacity_offsets", "sh_coeffs", "features")


@dataclass
class Camera:
    """Pinhole camera with a rigid world-to-camera transform."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    world_to_cam: np.ndarray  # (4,4), row [3] == (0,0,0,1)
    near: float = 0.01
    far: float = 100.0

    def __post_init__(self):
        self.world_to_cam = np.asarray(self.world_to_cam, dtype=np.float64)

    def validate(self) -> None:
        if self.world_to_cam.shape != (4, 4):
            raise ShapeMismatch("world_to_cam must be 4x4")
        r = self.world_to_cam[:3, :3]
        dev = np.abs(r.T @ r - np.eye(3)).max()
        if dev > 1e-9:
            raise ValueError(f"world_to_cam rotation not orthonormal (dev {dev:.2e})")
        if not 0.0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_cam[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_cam[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation


@dataclass
class ProjectedGaussians:
    """Screen-space view of a cloud: one row per Gaussian, with a validity mask.

    conic is the inverse of cov2d; bbox_half holds the half extents of the
    3-sigma axis-aligned bounding box (3*sqrt(diag(cov2d))).
    """

    mean2d: np.ndarray     # (N,2)
    cov2d: np.ndarray      # (N,2,2), low-pass floor already added
    conic: np.ndarray      # (N,2,2)
    depth: np.ndarray      # (N,)
    bbox_half: np.ndarray  # (N,2)
    valid: np.ndarray      # (N,) bool; False == culled


# ---------------------------------------------------------------------------
# quaternions and 3D covariance


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """(N,4) quaternions (w,x,y,z), normalized internally -> (N,3,3) rotations."""
    q = np.asarray(q)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3), dtype=q.dtype)
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


def _rotmat_grad_wrt_quat(qn: np.ndarray) -> np.ndarray:
    """dR/dq̂ for already-normalized quaternions: returns (N,3,3,4)."""
    w, x, y, z = qn[:, 0], qn[:, 1], qn[:, 2], qn[:, 3]
    zero = np.zeros_like(w)
    g = np.empty(qn.shape[:1] + (3, 3, 4), dtype=qn.dtype)
    # dR/dw
    g[:, :, :, 0] = np.stack([
        np.stack([zero, -2 * z, 2 * y], axis=-1),
        np.stack([2 * z, zero, -2 * x], axis=-1),
        np.stack([-2 * y, 2 * x, zero], axis=-1),
    ], axis=-2)
    # dR/dx
    g[:, :, :, 1] = np.stack([
        np.stack([zero, 2 * y, 2 * z], axis=-1),
        np.stack([2 * y, -4 * x, -2 * w], axis=-1),
        np.stack([2 * z, 2 * w, -4 * x], axis=-1),
    ], axis=-2)
    # dR/dy
    g[:, :, :, 2] = np.stack([
        np.stack([-4 * y, 2 * x, 2 * w], axis=-1),
        np.stack([2 * x, zero, 2 * z], axis=-1),
        np.stack([-2 * w, 2 * z, -4 * y], axis=-1),
    ], axis=-2)
    # dR/dz
    g[:, :, :, 3] = np.stack([
        np.stack([-4 * z, -2 * w, 2 * x], axis=-1),
        np.stack([2 * w, -4 * z, 2 * y], axis=-1),
        np.stack([2 * x, 2 * y, zero], axis=-1),
    ], axis=-2)
    return g


def covariance_from_params(log_scales: np.ndarray, rotations: np.ndarray) -> np.ndarray:
    """Sigma = R S S^T R^T with S = diag(exp(log_scales)). (N,3)+(N,4) -> (N,3,3)."""
    R = quat_to_rotmat(rotations)
    s = np.exp(log_scales)
    M = R * s[:, None, :]  # R @ diag(s)
    return M @ np.swapaxes(M, 1, 2)


def covariance_backward(log_scales: np.ndarray, rotations: np.ndarray,
                        d_sigma: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of covariance_from_params.

    d_sigma is dL/dSigma with Sigma treated as a full (generally asymmetric)
    3x3 gradient; returns (dL/dlog_scales, dL/drotations) where the rotation
    gradient is w.r.t. the raw (unnormalized) quaternion.
    """
    q = np.asarray(rotations)
    norm = np.linalg.norm(q, axis=1, keepdims=True)
    qn = q / norm
    R = quat_to_rotmat(qn)
    s = np.exp(log_scales)
    M = R * s[:, None, :]
    # Sigma = M M^T  =>  dL/dM = (G + G^T) M
    G = d_sigma + np.swapaxes(d_sigma, 1, 2)
    dM = G @ M
    # M = R diag(s): column j of M is s_j * column j of R
    dR = dM * s[:, None, :]
    ds = np.einsum("nij,nij->nj", R, dM)
    d_log_scales = ds * s
    dRdq = _rotmat_grad_wrt_quat(qn)
    d_qn = np.einsum("nij,nijk->nk", dR, dRdq)
    # through normalization: dq = (I - q̂ q̂^T) / |q| applied to dq̂
    d_q = (d_qn - np.sum(d_qn * qn, axis=1, keepdims=True) * qn) / norm
    return d_log_scales, d_q


# ---------------------------------------------------------------------------
# opacity


def thermal_opacity(opacity_logits: np.ndarray, thermal_offsets: np.ndarray) -> np.ndarray:
    """sigmoid(logit + offset); reduces exactly to the base opacity at offset 0."""
    return sigmoid(np.asarray(opacity_logits) + np.asarray(thermal_offsets))


def sigmoid_grad(value: np.ndarray) -> np.ndarray:
    """Derivative of sigmoid expressed through its output value."""
    return value * (1.0 - value)


# ---------------------------------------------------------------------------
# perspective projection (EWA-style affine approximation)


def project_gaussians(positions: np.ndarray, covariances: np.ndarray, camera: Camera,
                      lowpass: float = DEFAULT_LOWPASS,
                      cull_margin: float = 16.0) -> ProjectedGaussians:
    """Project world-space Gaussians into the camera's pixel plane.

    A Gaussian is culled when its camera-space depth leaves [near, far] or
    when the axis-aligned bounding box of its 3-sigma screen ellipse misses
    the image rectangle expanded by cull_margin pixels on every side.
    Culled rows keep placeholder values and are marked invalid.
    """
    dtype = positions.dtype
    W = camera.rotation.astype(dtype)
    trans = camera.translation.astype(dtype)
    t = positions @ W.T + trans
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]

    in_depth = (tz >= camera.near) & (tz <= camera.far)
    tz_safe = np.where(in_depth, tz, 1.0)

    inv_z = 1.0 / tz_safe
    mean2d = np.stack([camera.fx * tx * inv_z + camera.cx,
                       camera.fy * ty * inv_z + camera.cy], axis=1)

    # perspective Jacobian at the Gaussian center
    J = np.zeros((positions.shape[0], 2, 3), dtype=dtype)
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * tx * inv_z * inv_z
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * ty * inv_z * inv_z

    M = J @ W
    cov2d = M @ covariances @ np.swapaxes(M, 1, 2)
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    conic = np.empty_like(cov2d)
    inv_det = 1.0 / det
    conic[:, 0, 0] = cov2d[:, 1, 1] * inv_det
    conic[:, 1, 1] = cov2d[:, 0, 0] * inv_det
    conic[:, 0, 1] = -cov2d[:, 0, 1] * inv_det
    conic[:, 1, 0] = -cov2d[:, 1, 0] * inv_det

    # exact AABB of the 3-sigma ellipse
    bbox_half = CONFIDENCE_SIGMAS * np.sqrt(
        np.stack([cov2d[:, 0, 0], cov2d[:, 1, 1]], axis=1))

    on_screen = ((mean2d[:, 0] + bbox_half[:, 0] >= -cull_margin)
                 & (mean2d[:, 0] - bbox_half[:, 0] <= camera.width + cull_margin)
                 & (mean2d[:, 1] + bbox_half[:, 1] >= -cull_margin)
                 & (mean2d[:, 1] - bbox_half[:, 1] <= camera.height + cull_margin))
    valid = in_depth & on_screen

    return ProjectedGaussians(mean2d=mean2d, cov2d=cov2d, conic=conic,
                              depth=tz, bbox_half=bbox_half, valid=valid)


def project_backward(positions: np.ndarray, covariances: np.ndarray, camera: Camera,
                     proj: ProjectedGaussians, d_mean2d: np.ndarray,
                     d_cov2d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of project_gaussians: (dL/dmean2d, dL/dcov2d) -> (dL/dpositions, dL/dSigma).

    Culled rows receive zero gradient. The low-pass floor is additive so
    dL/dcov2d passes through it unchanged.
    """
    dtype = positions.dtype
    W = camera.rotation.astype(dtype)
    trans = camera.translation.astype(dtype)
    t = positions @ W.T + trans
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    vmask = proj.valid
    tz = np.where(vmask, tz, 1.0)
    inv_z = 1.0 / tz
    inv_z2 = inv_z * inv_z

    J = np.zeros((positions.shape[0], 2, 3), dtype=dtype)
    J[:, 0, 0] = camera.fx * inv_z
    J[:, 0, 2] = -camera.fx * tx * inv_z2
    J[:, 1, 1] = camera.fy * inv_z
    J[:, 1, 2] = -camera.fy * ty * inv_z2
    M = J @ W

    Gc = np.where(vmask[:, None, None], d_cov2d, 0.0)
    Gm = np.where(vmask[:, None], d_mean2d, 0.0)

    # cov2d = M Sigma M^T (+ lowpass I)
    d_sigma = np.swapaxes(M, 1, 2) @ Gc @ M
    GcT = Gc + np.swapaxes(Gc, 1, 2)
    dM = GcT @ M @ covariances
    dJ = dM @ W.T

    # mean2d path into camera-space point t
    dt = np.zeros_like(t)
    dt[:, 0] = Gm[:, 0] * camera.fx * inv_z
    dt[:, 1] = Gm[:, 1] * camera.fy * inv_z
    dt[:, 2] = (-Gm[:, 0] * camera.fx * tx - Gm[:, 1] * camera.fy * ty) * inv_z2

    # Jacobian path into t (only 4 J entries depend on t)
    dt[:, 0] += dJ[:, 0, 2] * (-camera.fx * inv_z2)
    dt[:, 1] += dJ[:, 1, 2] * (-camera.fy * inv_z2)
    dt[:, 2] += (dJ[:, 0, 0] * (-camera.fx * inv_z2)
                 + dJ[:, 1, 1] * (-camera.fy * inv_z2)
                 + dJ[:, 0, 2] * (2 * camera.fx * tx * inv_z2 * inv_z)
                 + dJ[:, 1, 2] * (2 * camera.fy * ty * inv_z2 * inv_z))

    d_positions = dt @ W
    return d_positions, d_sigma


# ---------------------------------------------------------------------------
# spherical harmonics (real basis up to degree 3, with the +0.5 shift)

_C0 = 0.28209479177387814
_C1 = 0.4886025119029199
_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
       -1.0925484305920792, 0.5462742152960396)
_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
       0.3731763325901154, -0.4570457994644658, 1.445305721320277,
       -0.5900435899266435)

SH_SHIFT = 0.5


def _sh_basis(degree: int, dirs: np.ndarray) -> np.ndarray:
    """Basis values for unit directions: (N,3) -> (N,(degree+1)^2)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    out = np.empty((n, (degree + 1) ** 2), dtype=dirs.dtype)
    out[:, 0] = _C0
    if degree >= 1:
        out[:, 1] = -_C1 * y
        out[:, 2] = _C1 * z
        out[:, 3] = -_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = _C2[0] * x * y
        out[:, 5] = _C2[1] * y * z
        out[:, 6] = _C2[2] * (2 * zz - xx - yy)
        out[:, 7] = _C2[3] * x * z
        out[:, 8] = _C2[4] * (xx - yy)
    if degree >= 3:
        out[:, 9] = _C3[0] * y * (3 * xx - yy)
        out[:, 10] = _C3[1] * x * y * z
        out[:, 11] = _C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = _C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = _C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = _C3[5] * z * (xx - yy)
        out[:, 15] = _C3[6] * x * (xx - 3 * yy)
    return out


def _sh_basis_grad(degree: int, dirs: np.ndarray) -> np.ndarray:
    """d(basis)/d(direction): (N,3) -> (N,(degree+1)^2,3)."""
    n = dirs.shape[0]
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    zero = np.zeros_like(x)
    g = np.zeros((n, (degree + 1) ** 2, 3), dtype=dirs.dtype)
    if degree >= 1:
        g[:, 1, 1] = -_C1
        g[:, 2, 2] = _C1
        g[:, 3, 0] = -_C1
    if degree >= 2:
        g[:, 4] = np.stack([_C2[0] * y, _C2[0] * x, zero], axis=-1)
        g[:, 5] = np.stack([zero, _C2[1] * z, _C2[1] * y], axis=-1)
        g[:, 6] = np.stack([-2 * _C2[2] * x, -2 * _C2[2] * y, 4 * _C2[2] * z], axis=-1)
        g[:, 7] = np.stack([_C2[3] * z, zero, _C2[3] * x], axis=-1)
        g[:, 8] = np.stack([2 * _C2[4] * x, -2 * _C2[4] * y, zero], axis=-1)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9] = np.stack([6 * _C3[0] * x * y, 3 * _C3[0] * (xx - yy), zero], axis=-1)
        g[:, 10] = np.stack([_C3[1] * y * z, _C3[1] * x * z, _C3[1] * x * y], axis=-1)
        g[:, 11] = np.stack([-2 * _C3[2] * x * y,
                             _C3[2] * (4 * zz - xx - 3 * yy),
                             8 * _C3[2] * y * z], axis=-1)
        g[:, 12] = np.stack([-6 * _C3[3] * x * z, -6 * _C3[3] * y * z,
                             _C3[3] * (6 * zz - 3 * xx - 3 * yy)], axis=-1)
        g[:, 13] = np.stack([_C3[4] * (4 * zz - 3 * xx - yy),
                             -2 * _C3[4] * x * y,
                             8 * _C3[4] * x * z], axis=-1)
        g[:, 14] = np.stack([2 * _C3[5] * x * z, -2 * _C3[5] * y * z,
                             _C3[5] * (xx - yy)], axis=-1)
        g[:, 15] = np.stack([3 * _C3[6] * (xx - yy), -6 * _C3[6] * x * y, zero], axis=-1)
    return g


def sh_evaluate(sh_coeffs: np.ndarray, view_dirs: np.ndarray, degree: int | None = None) -> np.ndarray:
    """Evaluate view-dependent color: sum_lm c_lm Y_lm(dir) + 0.5, unclamped.

    sh_coeffs is (N,K,3) with K >= (degree+1)^2; view_dirs must be unit.
    If degree is None the full coefficient set is used.
    """
    if degree is None:
        degree = int(round(np.sqrt(sh_coeffs.shape[1]))) - 1
    basis = _sh_basis(degree, view_dirs)
    k = basis.shape[1]
    return np.einsum("nk,nkc->nc", basis, sh_coeffs[:, :k, :]) + SH_SHIFT


def sh_backward(sh_coeffs: np.ndarray, view_dirs: np.ndarray, d_color: np.ndarray,
                degree: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Adjoint of sh_evaluate: returns (dL/dsh_coeffs, dL/dview_dirs).

    Coefficients above the active degree receive zero gradient.
    """
    if degree is None:
        degree = int(round(np.sqrt(sh_coeffs.shape[1]))) - 1
    basis = _sh_basis(degree, view_dirs)
    k = basis.shape[1]
    d_sh = np.zeros_like(sh_coeffs)
    d_sh[:, :k, :] = basis[:, :, None] * d_color[:, None, :]
    bgrad = _sh_basis_grad(degree, view_dirs)  # (N,k,3)
    coeff_dot = np.einsum("nkc,nc->nk", sh_coeffs[:, :k, :], d_color)
    d_dirs = np.einsum("nk,nkd->nd", coeff_dot, bgrad)
    return d_sh, d_dirs


def view_directions(positions: np.ndarray, cam_center: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unit directions from the camera center to each Gaussian; returns (dirs, norms)."""
    v = positions - cam_center.astype(positions.dtype)
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    return v / norms, norms


def view_directions_backward(dirs: np.ndarray, norms: np.ndarray,
                             d_dirs: np.ndarray) -> np.ndarray:
    """Adjoint of the normalization in view_directions, into positions."""
    return (d_dirs - np.sum(d_dirs * dirs, axis=1, keepdims=True) * dirs) / norms
