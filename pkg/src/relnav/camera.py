"""Pinhole camera: projection, point/line residuals and their se(3) Jacobians.

All Jacobians are taken with respect to a left perturbation
``exp(eps^) T`` of the model-to-camera pose, columns ordered
``(rho1, rho2, rho3, phi1, phi2, phi3)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera

DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    """Focal scalings and principal point, all in pixels."""

    fx: float
    fy: float
    d1: float
    d2: float
    width: int = 640
    height: int = 480

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal scalings must be positive")
        if not (0 <= self.d1 < self.width and 0 <= self.d2 < self.height):
            raise ValueError("principal point must lie on the sensor")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.d1], [0.0, self.fy, self.d2], [0.0, 0.0, 1.0]])

    @classmethod
    def from_fov(cls, width, height, hfov_deg, vfov_deg):
        """Centered camera with the given full fields of view."""
        fx = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        fy = 0.5 * height / np.tan(np.radians(vfov_deg) / 2)
        return cls(fx, fy, width / 2.0, height / 2.0, int(width), int(height))

    def backproject(self, z):
        """Unit-depth rays (n, 3) through pixel coordinates (n, 2)."""
        z = np.atleast_2d(np.asarray(z, dtype=float))
        return np.column_stack([(z[:, 0] - self.d1) / self.fx,
                                (z[:, 1] - self.d2) / self.fy,
                                np.ones(len(z))])

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "d1": self.d1, "d2": self.d2,
                "width": self.width, "height": self.height}


def normalize_line(l):
    """Scale homogeneous line coefficients so that l1^2 + l2^2 = 1."""
    l = np.asarray(l, dtype=float)
    n = np.hypot(l[..., 0], l[..., 1])
    if np.any(n == 0):
        raise ValueError("line has (l1, l2) = (0, 0)")
    return l / n[..., None] if l.ndim > 1 else l / n


def line_through(a, b):
    """Normalized line through two image points."""
    return normalize_line(np.cross([a[0], a[1], 1.0], [b[0], b[1], 1.0]))


def _camera_points(T, p):
    pc = np.asarray(p, dtype=float) @ T.R.T + T.t
    if np.any(pc[..., 2] <= DEPTH_EPS):
        raise BehindCamera("point depth %.3g m is below the camera epsilon" % float(np.min(pc[..., 2])))
    return pc


def project_camera(K: Intrinsics, pc):
    """Project points already expressed in the camera frame."""
    pc = np.asarray(pc, dtype=float)
    if np.any(pc[..., 2] <= DEPTH_EPS):
        raise BehindCamera("point depth below the camera epsilon")
    x = pc[..., 0] / pc[..., 2]
    y = pc[..., 1] / pc[..., 2]
    return np.stack([K.fx * x + K.d1, K.fy * y + K.d2], axis=-1)


def project(K: Intrinsics, T, p):
    """Image coordinates of model point(s) ``p`` seen from pose ``T``.

    Accepts a single point (3,) or an array (n, 3).
    """
    return project_camera(K, _camera_points(T, p))


def _jac_camera(K, pc):
    # (n, 2, 6) Jacobian from camera-frame points
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    iz = 1.0 / z
    J = np.zeros((len(pc), 2, 6))
    J[:, 0, 0] = K.fx * iz
    J[:, 0, 2] = -K.fx * x * iz * iz
    J[:, 0, 3] = -K.fx * x * y * iz * iz
    J[:, 0, 4] = K.fx * (1.0 + x * x * iz * iz)
    J[:, 0, 5] = -K.fx * y * iz
    J[:, 1, 1] = K.fy * iz
    J[:, 1, 2] = -K.fy * y * iz * iz
    J[:, 1, 3] = -K.fy * (1.0 + y * y * iz * iz)
    J[:, 1, 4] = K.fy * x * y * iz * iz
    J[:, 1, 5] = K.fy * x * iz
    return J


def point_jacobian(K: Intrinsics, T, p):
    """2x6 Jacobian of :func:`project` (or (n, 2, 6) for stacked points)."""
    p = np.asarray(p, dtype=float)
    pc = _camera_points(T, np.atleast_2d(p))
    J = _jac_camera(K, pc)
    return J[0] if p.ndim == 1 else J


def line_residual(l, K: Intrinsics, T, p):
    """Signed pixel distance of the reprojection of ``p`` from line ``l``.

    ``l`` is normalized on entry, so the result is in pixels regardless of
    the scale the caller used.
    """
    l = normalize_line(l)
    z = project(K, T, p)
    return z[..., 0] * l[..., 0] + z[..., 1] * l[..., 1] + l[..., 2]


def line_jacobian(l, K: Intrinsics, T, p):
    l = normalize_line(l)
    J = point_jacobian(K, T, p)
    if J.ndim == 2:
        return l[:2] @ J
    return np.einsum("ni,nij->nj", np.broadcast_to(l[..., :2], (len(J), 2)), J)
