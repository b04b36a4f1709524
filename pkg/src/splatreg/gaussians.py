"""Gaussian primitives, pinhole cameras and the EWA-style screen-space projection.

Quaternions are stored as ``(w, x, y, z)``. Cameras follow the OpenCV
convention: camera space has +z forward, +y down, and pixel ``(row, col)`` has
its center at image coordinate ``(x=col, y=row)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

LOWPASS = 0.3
Z_NEAR = 0.01
FRUSTUM_MARGIN = 1.3


class InvalidParameterError(ValueError):
    """Raised when a primitive or camera parameter is non-finite or out of range."""


# ---------------------------------------------------------------------------
# Quaternion and covariance helpers
# ---------------------------------------------------------------------------


def quat_to_matrix(q):
    """Rotation matrices for (normalized) quaternions.

    Accepts ``(4,)`` or ``(N, 4)``; returns ``(3, 3)`` or ``(N, 3, 3)``.
    """
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.empty(q.shape[:-1] + (3, 3))
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


def quat_to_matrix_vjp(q, grad_R):
    """Pull a gradient w.r.t. ``quat_to_matrix(q)`` back onto ``q`` (batched)."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    g = grad_R
    gw = 2 * (-z * g[..., 0, 1] + y * g[..., 0, 2] + z * g[..., 1, 0]
              - x * g[..., 1, 2] - y * g[..., 2, 0] + x * g[..., 2, 1])
    gx = 2 * (y * g[..., 0, 1] + z * g[..., 0, 2] + y * g[..., 1, 0] - 2 * x * g[..., 1, 1]
              - w * g[..., 1, 2] + z * g[..., 2, 0] + w * g[..., 2, 1] - 2 * x * g[..., 2, 2])
    gy = 2 * (-2 * y * g[..., 0, 0] + x * g[..., 0, 1] + w * g[..., 0, 2] + x * g[..., 1, 0]
              + z * g[..., 1, 2] - w * g[..., 2, 0] + z * g[..., 2, 1] - 2 * y * g[..., 2, 2])
    gz = 2 * (-2 * z * g[..., 0, 0] - w * g[..., 0, 1] + x * g[..., 0, 2] + w * g[..., 1, 0]
              - 2 * z * g[..., 1, 1] + y * g[..., 1, 2] + x * g[..., 2, 0] + y * g[..., 2, 1])
    return np.stack([gw, gx, gy, gz], axis=-1)


def normalize_quat(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def covariance_from_scale_rotation(scale, rotation):
    """3D covariance ``R diag(s)^2 R^T`` of a primitive.

    ``rotation`` is normalized before use, so any non-zero quaternion is accepted.
    Works on single primitives or stacked ``(N, 3)`` / ``(N, 4)`` arrays.
    """
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not (np.all(np.isfinite(scale)) and np.all(np.isfinite(rotation))):
        raise InvalidParameterError("non-finite scale or rotation")
    norm = np.linalg.norm(rotation, axis=-1)
    if np.any(norm == 0):
        raise InvalidParameterError("zero quaternion")
    M = quat_to_matrix(rotation / norm[..., None]) * scale[..., None, :]
    return M @ np.swapaxes(M, -1, -2)


# ---------------------------------------------------------------------------
# Data types
# ---------------------------------------------------------------------------


@dataclass
class GaussianPrimitive:
    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = normalize_quat(self.rotation)
        self.opacity = float(self.opacity)
        self.color = np.asarray(self.color, dtype=np.float64)

    @property
    def covariance(self):
        return covariance_from_scale_rotation(self.scale, self.rotation)


@dataclass
class Scene:
    """A set of primitives stored as stacked parameter arrays.

    Primitive ``i`` is ``(mu[i], scale[i], rotation[i], opacity[i], color[i])``;
    indices stay stable for the lifetime of a training run unless pruned.
    """

    mu: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: np.ndarray
    color: np.ndarray
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(-1, 3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(-1, 4)
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(-1)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(-1, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        n = len(self.mu)
        for name in ("scale", "rotation", "opacity", "color"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")

    def __len__(self):
        return len(self.mu)

    @classmethod
    def from_primitives(cls, primitives, background=(0.0, 0.0, 0.0)):
        prims = list(primitives)
        return cls(
            mu=np.array([p.mu for p in prims]).reshape(-1, 3),
            scale=np.array([p.scale for p in prims]).reshape(-1, 3),
            rotation=np.array([p.rotation for p in prims]).reshape(-1, 4),
            opacity=np.array([p.opacity for p in prims]),
            color=np.array([p.color for p in prims]).reshape(-1, 3),
            background=background,
        )

    @property
    def primitives(self):
        return [
            GaussianPrimitive(self.mu[i], self.scale[i], self.rotation[i], self.opacity[i], self.color[i])
            for i in range(len(self))
        ]

    def copy(self):
        return Scene(self.mu.copy(), self.scale.copy(), self.rotation.copy(),
                     self.opacity.copy(), self.color.copy(), self.background.copy())

    def subset(self, keep):
        return Scene(self.mu[keep], self.scale[keep], self.rotation[keep],
                     self.opacity[keep], self.color[keep], self.background.copy())

    def validate(self):
        """Raise ``InvalidParameterError`` naming the first non-finite primitive."""
        if len(self) == 0:
            raise InvalidParameterError("scene has no primitives")
        for name in ("mu", "scale", "rotation", "opacity", "color"):
            arr = getattr(self, name).reshape(len(self), -1)
            bad = ~np.all(np.isfinite(arr), axis=1)
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise InvalidParameterError(f"primitive {i} has non-finite {name}")
        if not np.all(np.isfinite(self.background)):
            raise InvalidParameterError("non-finite background")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose ``x_cam = R x_world + t``."""

    R: np.ndarray
    t: np.ndarray
    focal: tuple
    principal_point: tuple
    resolution: tuple  # (H, W)

    def __post_init__(self):
        self.R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        self.t = np.asarray(self.t, dtype=np.float64).reshape(3)
        self.focal = tuple(float(f) for f in self.focal)
        self.principal_point = tuple(float(c) for c in self.principal_point)
        self.resolution = tuple(int(r) for r in self.resolution)
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise InvalidParameterError(f"bad resolution {self.resolution}")
        if not np.allclose(self.R @ self.R.T, np.eye(3), atol=1e-6):
            raise InvalidParameterError("pose rotation is not orthonormal")

    @property
    def height(self):
        return self.resolution[0]

    @property
    def width(self):
        return self.resolution[1]

    @property
    def center(self):
        return -self.R.T @ self.t

    @property
    def pose(self):
        P = np.eye(4)
        P[:3, :3] = self.R
        P[:3, 3] = self.t
        return P

    @classmethod
    def from_pose(cls, pose, focal, principal_point, resolution):
        pose = np.asarray(pose, dtype=np.float64).reshape(4, 4)
        return cls(pose[:3, :3], pose[:3, 3], focal, principal_point, resolution)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), focal=None, resolution=(64, 64), fov_deg=50.0):
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        H, W = resolution
        if focal is None:
            f = 0.5 * W / np.tan(np.radians(fov_deg) / 2)
            focal = (f, f)
        return cls(R, -R @ eye, focal, ((W - 1) / 2.0, (H - 1) / 2.0), resolution)


@dataclass
class Gaussian2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    view_depth: float


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


@dataclass
class Projection:
    """Batched screen-space footprints plus the intermediates needed for the VJP."""

    mean2d: np.ndarray  # (N, 2)
    cov2d: np.ndarray  # (N, 2, 2), low-pass included
    view_depth: np.ndarray  # (N,)
    valid: np.ndarray  # (N,) bool
    t_cam: np.ndarray
    J: np.ndarray
    T: np.ndarray
    cov3d: np.ndarray
    M: np.ndarray
    Rq: np.ndarray
    qhat: np.ndarray
    qnorm: np.ndarray
    offset: np.ndarray  # mu - camera center


def project_gaussians(scene, cam, lowpass=LOWPASS, z_near=Z_NEAR, frustum=FRUSTUM_MARGIN):
    """Project every primitive of ``scene`` through ``cam`` (EWA local-affine).

    Centers further than ``frustum`` times the half field of view off-axis are
    culled; the affine approximation explodes their footprints otherwise.
    """
    qnorm = np.linalg.norm(scene.rotation, axis=1)
    safe = np.where(qnorm > 0, qnorm, 1.0)
    qhat = scene.rotation / safe[:, None]
    Rq = quat_to_matrix(qhat)
    M = Rq * scene.scale[:, None, :]
    cov3d = M @ np.swapaxes(M, 1, 2)

    t_cam = scene.mu @ cam.R.T + cam.t
    tz = t_cam[:, 2]
    valid = (tz > z_near) & (qnorm > 0)
    tz_s = np.where(valid, tz, 1.0)
    fx, fy = cam.focal
    cx, cy = cam.principal_point
    if frustum is not None:
        H, W = cam.resolution
        valid &= np.abs(t_cam[:, 0] / tz_s) <= frustum * 0.5 * W / fx
        valid &= np.abs(t_cam[:, 1] / tz_s) <= frustum * 0.5 * H / fy
    mean2d = np.stack([fx * t_cam[:, 0] / tz_s + cx, fy * t_cam[:, 1] / tz_s + cy], axis=1)

    J = np.zeros((len(scene), 2, 3))
    J[:, 0, 0] = fx / tz_s
    J[:, 0, 2] = -fx * t_cam[:, 0] / tz_s**2
    J[:, 1, 1] = fy / tz_s
    J[:, 1, 2] = -fy * t_cam[:, 1] / tz_s**2
    T = J @ cam.R
    cov2d = T @ cov3d @ np.swapaxes(T, 1, 2)
    cov2d[:, 0, 0] += lowpass
    cov2d[:, 1, 1] += lowpass
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] * cov2d[:, 1, 0]
    valid &= np.isfinite(det) & (det > 0)

    offset = scene.mu - cam.center
    view_depth = np.linalg.norm(offset, axis=1)
    return Projection(mean2d, cov2d, view_depth, valid, t_cam, J, T, cov3d, M, Rq, qhat, safe, offset)


def project_gaussian(p, cam, lowpass=LOWPASS, z_near=Z_NEAR):
    """Project a single primitive; returns ``None`` when it is culled."""
    scene = Scene.from_primitives([p])
    scene.validate()
    proj = project_gaussians(scene, cam, lowpass, z_near)
    if not proj.valid[0]:
        return None
    return Gaussian2D(proj.mean2d[0], proj.cov2d[0], float(proj.view_depth[0]))


def project_vjp(scene, cam, proj, g_mean2d, g_cov2d, g_depth):
    """Gradients of the projection outputs w.r.t. ``mu``, ``scale`` and ``rotation``.

    ``g_cov2d`` uses the full-matrix convention (entries treated independently).
    Culled primitives receive zero gradient.
    """
    fx, fy = cam.focal
    valid = proj.valid
    g_mean2d = np.where(valid[:, None], g_mean2d, 0.0)
    g_cov2d = np.where(valid[:, None, None], g_cov2d, 0.0)
    g_depth = np.where(valid, g_depth, 0.0)

    T, J, cov3d, M = proj.T, proj.J, proj.cov3d, proj.M
    Tt = np.swapaxes(T, 1, 2)
    g_cov3d = Tt @ g_cov2d @ T
    g_T = (g_cov2d + np.swapaxes(g_cov2d, 1, 2)) @ T @ cov3d
    g_J = g_T @ cam.R.T

    t = proj.t_cam
    tz = np.where(valid, t[:, 2], 1.0)
    g_t = np.zeros_like(t)
    # Jacobian entries
    g_t[:, 0] += -fx / tz**2 * g_J[:, 0, 2]
    g_t[:, 1] += -fy / tz**2 * g_J[:, 1, 2]
    g_t[:, 2] += (-fx / tz**2 * g_J[:, 0, 0] + 2 * fx * t[:, 0] / tz**3 * g_J[:, 0, 2]
                  - fy / tz**2 * g_J[:, 1, 1] + 2 * fy * t[:, 1] / tz**3 * g_J[:, 1, 2])
    # perspective mean
    g_t[:, 0] += fx / tz * g_mean2d[:, 0]
    g_t[:, 1] += fy / tz * g_mean2d[:, 1]
    g_t[:, 2] += -fx * t[:, 0] / tz**2 * g_mean2d[:, 0] - fy * t[:, 1] / tz**2 * g_mean2d[:, 1]

    depth = np.where(proj.view_depth > 0, proj.view_depth, 1.0)
    g_mu = g_t @ cam.R + (g_depth / depth)[:, None] * proj.offset

    g_M = (g_cov3d + np.swapaxes(g_cov3d, 1, 2)) @ M
    g_scale = np.sum(g_M * proj.Rq, axis=1)
    g_Rq = g_M * scene.scale[:, None, :]
    g_qhat = quat_to_matrix_vjp(proj.qhat, g_Rq)
    radial = np.sum(g_qhat * proj.qhat, axis=1, keepdims=True)
    g_rot = (g_qhat - radial * proj.qhat) / proj.qnorm[:, None]
    g_rot = np.where(valid[:, None], g_rot, 0.0)
    return g_mu, g_scale, g_rot


# ---------------------------------------------------------------------------
# 2D evaluation
# ---------------------------------------------------------------------------


def conic(cov2d):
    """Inverse 2x2 covariance as ``(A, B, C)`` so that ``q = A dx^2 + 2 B dx dy + C dy^2``."""
    a, b, c = cov2d[..., 0, 0], cov2d[..., 0, 1], cov2d[..., 1, 1]
    det = a * c - b * b
    return c / det, -b / det, a / det


def eval_gaussian_2d(g, pixel):
    """Unnormalized 2D Gaussian ``exp(-0.5 d^T cov^-1 d)`` at ``pixel``."""
    cov = np.asarray(g.cov2d, dtype=np.float64)
    det = cov[0, 0] * cov[1, 1] - cov[0, 1] * cov[1, 0]
    if not np.isfinite(det) or det <= 0:
        raise np.linalg.LinAlgError("singular 2D covariance")
    A, B, C = conic(cov)
    dx, dy = np.asarray(pixel, dtype=np.float64) - np.asarray(g.mean2d, dtype=np.float64)
    return float(np.exp(-0.5 * (A * dx * dx + 2 * B * dx * dy + C * dy * dy)))
