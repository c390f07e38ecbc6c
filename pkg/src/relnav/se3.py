"""Lie-group machinery for SO(3), SE(3) and unit quaternions.

Conventions
-----------
* Twists are 6-vectors ``xi = (rho, phi)``: translational part first,
  rotational part last.
* Poses compose on the LEFT: ``g (+) xi = exp(xi^) g``.
* Quaternions are SCALAR-LAST, ``q = (e1, e2, e3, q)``, and follow the
  attitude-matrix convention

      R(q) = (q^2 - |e|^2) I - 2 q e^ + 2 e e^T

  with Shuster's product, so that ``R(q0 * q1) = R(q0) R(q1)``.  Note that
  most robotics libraries use scalar-first Hamilton quaternions whose
  rotation matrix is the transpose of the one above.
"""

from __future__ import annotations

import numpy as np

from .errors import NearPiRotation

__all__ = [
    "hat3", "vee3", "hat6", "vee6", "exp_so3", "log_so3", "exp_se3", "log_se3",
    "se3_N", "se3_N_inv", "se3_M", "left_jacobian_se3", "adjoint", "ad_se3",
    "oplus", "ominus", "Pose", "QuatPose", "quat_to_rot", "rot_to_quat",
    "shuster_product", "quat_conj", "exp_quat", "log_quat", "rotation_angle",
    "reorthonormalize", "random_rotation", "random_pose",
]

# Below this angle the trigonometric ratios switch to truncated Taylor series.
SMALL_ANGLE = 1e-4
# Drift tolerance that triggers polar re-orthonormalization.
ORTHO_TOL = 1e-7


def hat3(phi):
    """Skew-symmetric matrix such that ``hat3(a) @ b == cross(a, b)``."""
    x, y, z = np.asarray(phi, dtype=float)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee3(W):
    W = np.asarray(W, dtype=float)
    return np.array([W[2, 1], W[0, 2], W[1, 0]])


def hat6(xi):
    """4x4 Lie-algebra matrix of a twist."""
    xi = np.asarray(xi, dtype=float)
    X = np.zeros((4, 4))
    X[:3, :3] = hat3(xi[3:])
    X[:3, 3] = xi[:3]
    return X


def vee6(X):
    X = np.asarray(X, dtype=float)
    return np.concatenate([X[:3, 3], vee3(X[:3, :3])])


def _sin_ratio(theta):
    # sin(t)/t
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 - t2 / 6.0 + t2 * t2 / 120.0
    return np.sin(theta) / theta


def _cos_ratio(theta):
    # (1 - cos t)/t^2
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 0.5 - t2 / 24.0 + t2 * t2 / 720.0
    return (1.0 - np.cos(theta)) / (theta * theta)


def _sin_cubic_ratio(theta):
    # (t - sin t)/t^3
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0
    return (theta - np.sin(theta)) / theta**3


def exp_so3(phi):
    """Rodrigues formula for the rotation vector ``phi``."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    W = hat3(phi)
    return np.eye(3) + _sin_ratio(theta) * W + _cos_ratio(theta) * (W @ W)


def rotation_angle(R):
    """Geodesic angle of a rotation matrix, in [0, pi]."""
    R = np.asarray(R, dtype=float)
    s = 0.5 * np.linalg.norm(vee3(R - R.T))
    c = 0.5 * (np.trace(R) - 1.0)
    return float(np.arctan2(s, c))


def log_so3(R):
    """Rotation vector of ``R``; well conditioned up to and including pi."""
    R = np.asarray(R, dtype=float)
    v = 0.5 * vee3(R - R.T)  # sin(theta) * axis
    s = float(np.linalg.norm(v))
    c = 0.5 * (np.trace(R) - 1.0)
    theta = float(np.arctan2(s, c))
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        return v * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    if c > -0.9:
        return v * (theta / s)
    # Near pi the antisymmetric part vanishes; read the axis off the
    # symmetric part using its largest diagonal entry.
    S = 0.5 * (R + R.T) - c * np.eye(3)  # (1 - cos) a a^T
    k = int(np.argmax(np.diag(S)))
    col = S[:, k]
    if col[k] <= 0.0:
        raise NearPiRotation("symmetric part has no positive diagonal entry")
    axis = col / np.sqrt(col[k] * (1.0 - c))
    axis /= np.linalg.norm(axis)
    if np.dot(axis, v) < 0.0:
        axis = -axis
    return theta * axis


def se3_N(phi):
    """Left Jacobian of SO(3); the translation coupling of ``exp_se3``."""
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    W = hat3(phi)
    return np.eye(3) + _cos_ratio(theta) * W + _sin_cubic_ratio(theta) * (W @ W)


def se3_N_inv(phi):
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    W = hat3(phi)
    # (1 - (t/2) cot(t/2)) / t^2 cancels badly well above SMALL_ANGLE.
    if theta < 1e-2:
        t2 = theta * theta
        d = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    else:
        d = (1.0 - 0.5 * theta / np.tan(0.5 * theta)) / (theta * theta)
    return np.eye(3) - 0.5 * W + d * (W @ W)


def se3_M(xi):
    """Off-diagonal block of the SE(3) left Jacobian for twist ``xi``.

    Closed form in ``rho^`` and ``phi^``; the two high-order coefficients
    suffer catastrophic cancellation for small angles, so their series are
    used below 0.1 rad.
    """
    xi = np.asarray(xi, dtype=float)
    P = hat3(xi[:3])
    F = hat3(xi[3:])
    theta = float(np.linalg.norm(xi[3:]))
    t2 = theta * theta
    c1 = _sin_cubic_ratio(theta)
    if theta < 0.1:
        c2 = 1.0 / 24.0 - t2 / 720.0 + t2 * t2 / 40320.0
        c3 = 1.0 / 120.0 - t2 / 2520.0 + t2 * t2 / 120960.0
    else:
        c2 = (t2 + 2.0 * np.cos(theta) - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * np.sin(theta) + theta * np.cos(theta)) / (2.0 * t2 * t2 * theta)
    FP = F @ P
    PF = P @ F
    FPF = FP @ F
    FF = F @ F
    return (0.5 * P
            + c1 * (FP + PF + FPF)
            + c2 * (FF @ P + PF @ F - 3.0 * FPF)
            + c3 * (FPF @ F + FF @ PF))


def left_jacobian_se3(xi):
    """6x6 left Jacobian, ``sum_k ad(xi)^k / (k+1)!``."""
    xi = np.asarray(xi, dtype=float)
    N = se3_N(xi[3:])
    J = np.zeros((6, 6))
    J[:3, :3] = N
    J[3:, 3:] = N
    J[:3, 3:] = se3_M(xi)
    return J


def exp_se3(xi):
    xi = np.asarray(xi, dtype=float)
    phi = xi[3:]
    return Pose(exp_so3(phi), se3_N(phi) @ xi[:3], check=False)


def log_se3(T):
    """Twist of a pose (rotation angle must stay below pi)."""
    phi = log_so3(T.R)
    rho = se3_N_inv(phi) @ T.t
    return np.concatenate([rho, phi])


def adjoint(T):
    R, t = T.R, T.t
    A = np.zeros((6, 6))
    A[:3, :3] = R
    A[3:, 3:] = R
    A[:3, 3:] = hat3(t) @ R
    return A


def ad_se3(xi):
    """Adjoint of the algebra on itself, so that ``ad(a) b == [a, b]``."""
    xi = np.asarray(xi, dtype=float)
    F = hat3(xi[3:])
    A = np.zeros((6, 6))
    A[:3, :3] = F
    A[3:, 3:] = F
    A[:3, 3:] = hat3(xi[:3])
    return A


def reorthonormalize(R):
    """Nearest rotation (polar factor) when drift exceeds ``ORTHO_TOL``."""
    R = np.asarray(R, dtype=float)
    if np.linalg.norm(R.T @ R - np.eye(3)) <= ORTHO_TOL:
        return R
    U, _, Vt = np.linalg.svd(R)
    Q = U @ Vt
    if np.linalg.det(Q) < 0:
        U[:, -1] = -U[:, -1]
        Q = U @ Vt
    return Q


class Pose:
    """Rigid transform ``p -> R p + t`` held as (rotation, translation).

    Instances are immutable; every operation returns a new pose.
    """

    __slots__ = ("R", "t")

    def __init__(self, R=None, t=None, check=True):
        R = np.eye(3) if R is None else np.array(R, dtype=float)
        t = np.zeros(3) if t is None else np.array(t, dtype=float).reshape(3)
        if R.shape != (3, 3):
            raise ValueError("rotation must be 3x3")
        if check:
            if abs(np.linalg.det(R) - 1.0) > 1e-6 or np.linalg.norm(R.T @ R - np.eye(3)) > 1e-6:
                raise ValueError("rotation matrix is not orthonormal with det +1")
        R = reorthonormalize(R)
        R.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    def __setattr__(self, name, value):
        raise AttributeError("Pose is immutable")

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3), check=False)

    @classmethod
    def from_matrix(cls, T):
        T = np.asarray(T, dtype=float)
        return cls(T[:3, :3], T[:3, 3])

    @classmethod
    def from_quat(cls, q, t):
        return cls(quat_to_rot(q), t, check=False)

    def matrix(self):
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.t
        return T

    def quat(self):
        return rot_to_quat(self.R)

    def inverse(self):
        Rt = self.R.T
        return Pose(Rt, -Rt @ self.t, check=False)

    def __matmul__(self, other):
        return Pose(self.R @ other.R, self.R @ other.t + self.t, check=False)

    def apply(self, p):
        """Transform a point (3,) or an array of points (n, 3)."""
        p = np.asarray(p, dtype=float)
        return p @ self.R.T + self.t

    def oplus(self, xi):
        return exp_se3(xi) @ self

    def ominus(self, other):
        return log_se3(self @ other.inverse())

    def rotation(self):
        return self.R

    def translation(self):
        return self.t

    def __repr__(self):
        return f"Pose(R={self.R.tolist()}, t={self.t.tolist()})"


class QuatPose:
    """Pose parameterized by a scalar-last unit quaternion and a translation.

    Mirrors the :class:`Pose` interface so filters may use either.
    """

    __slots__ = ("q", "t")

    def __init__(self, q, t):
        q = np.array(q, dtype=float).reshape(4)
        q /= np.linalg.norm(q)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", np.array(t, dtype=float).reshape(3))

    def __setattr__(self, name, value):
        raise AttributeError("QuatPose is immutable")

    @classmethod
    def from_pose(cls, T):
        return cls(rot_to_quat(T.R), T.t)

    @property
    def R(self):
        return quat_to_rot(self.q)

    def rotation(self):
        return self.R

    def translation(self):
        return self.t

    def to_pose(self):
        return Pose(self.R, self.t, check=False)

    def matrix(self):
        return self.to_pose().matrix()

    def apply(self, p):
        return np.asarray(p, dtype=float) @ self.R.T + self.t

    def inverse(self):
        qi = quat_conj(self.q)
        return QuatPose(qi, -(quat_to_rot(qi) @ self.t))

    def __matmul__(self, other):
        q = shuster_product(self.q, other.q)
        return QuatPose(q, self.R @ other.t + self.t)

    def oplus(self, xi):
        xi = np.asarray(xi, dtype=float)
        dq = exp_quat(xi[3:])
        return QuatPose(shuster_product(dq, self.q),
                        quat_to_rot(dq) @ self.t + se3_N(xi[3:]) @ xi[:3])

    def ominus(self, other):
        dq = shuster_product(self.q, quat_conj(other.q))
        phi = log_quat(dq)
        rho = se3_N_inv(phi) @ (self.t - quat_to_rot(dq) @ other.t)
        return np.concatenate([rho, phi])


def oplus(g, xi):
    """``g (+) xi = exp(xi^) g`` for either pose parameterization."""
    return g.oplus(xi)


def ominus(g1, g0):
    """Twist ``xi`` such that ``g0 (+) xi == g1``."""
    return g1.ominus(g0)


def quat_to_rot(q):
    q = np.asarray(q, dtype=float)
    e, s = q[:3], q[3]
    return (s * s - e @ e) * np.eye(3) - 2.0 * s * hat3(e) + 2.0 * np.outer(e, e)


def rot_to_quat(R):
    """Inverse of :func:`quat_to_rot`, returned with non-negative scalar part."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    diag = np.diag(R)
    cand = np.array([1.0 + 2 * diag[0] - tr, 1.0 + 2 * diag[1] - tr, 1.0 + 2 * diag[2] - tr, 1.0 + tr])
    k = int(np.argmax(cand))
    qv = np.zeros(4)
    big = 0.5 * np.sqrt(cand[k])  # |component k|
    # Products obtained from sums/differences of off-diagonal pairs.
    s_e1 = (R[1, 2] - R[2, 1]) / 4.0  # q e1
    s_e2 = (R[2, 0] - R[0, 2]) / 4.0  # q e2
    s_e3 = (R[0, 1] - R[1, 0]) / 4.0  # q e3
    e1e2 = (R[0, 1] + R[1, 0]) / 4.0
    e2e3 = (R[1, 2] + R[2, 1]) / 4.0
    e1e3 = (R[0, 2] + R[2, 0]) / 4.0
    if k == 3:
        qv[3] = big
        qv[:3] = np.array([s_e1, s_e2, s_e3]) / big
    elif k == 0:
        qv[0] = big
        qv[1], qv[2], qv[3] = e1e2 / big, e1e3 / big, s_e1 / big
    elif k == 1:
        qv[1] = big
        qv[0], qv[2], qv[3] = e1e2 / big, e2e3 / big, s_e2 / big
    else:
        qv[2] = big
        qv[0], qv[1], qv[3] = e1e3 / big, e2e3 / big, s_e3 / big
    if qv[3] < 0:
        qv = -qv
    return qv / np.linalg.norm(qv)


def shuster_product(q0, q1):
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    e0, s0 = q0[:3], q0[3]
    e1, s1 = q1[:3], q1[3]
    e = s0 * e1 - np.cross(e0, e1) + s1 * e0
    return np.concatenate([e, [s0 * s1 - e0 @ e1]])


def quat_conj(q):
    q = np.asarray(q, dtype=float)
    return np.concatenate([-q[:3], q[3:]])


def exp_quat(phi):
    """Unit quaternion whose attitude matrix equals ``exp_so3(phi)``.

    Under the attitude convention above the vector part points along
    ``-phi``; the result is returned with non-negative sign convention of
    the half-angle cosine.
    """
    phi = np.asarray(phi, dtype=float)
    theta = float(np.linalg.norm(phi))
    half = 0.5 * theta
    if theta < SMALL_ANGLE:
        t2 = theta * theta
        k = 0.5 - t2 / 48.0 + t2 * t2 / 3840.0  # sin(t/2)/t
    else:
        k = np.sin(half) / theta
    return np.concatenate([-k * phi, [np.cos(half)]])


def log_quat(q):
    """Rotation vector of a unit quaternion (inverse of :func:`exp_quat`)."""
    q = np.asarray(q, dtype=float)
    if q[3] < 0:
        q = -q
    e, s = q[:3], q[3]
    ne = float(np.linalg.norm(e))
    theta = 2.0 * np.arctan2(ne, s)
    if ne < 1e-12:
        return -2.0 * e / max(s, 1e-300)
    return -theta * e / ne


def random_rotation(rng, max_angle=np.pi):
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return exp_so3(axis * rng.uniform(0.0, max_angle))


def random_pose(rng, max_angle=np.pi, t_scale=1.0):
    return Pose(random_rotation(rng, max_angle), rng.normal(scale=t_scale, size=3), check=False)
