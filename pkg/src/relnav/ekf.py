"""Error-state Kalman filter on SE(3) with a constant-twist motion model.

The nominal state is a pose ``u`` (target to chaser) and a twist
``w = (nu, omega)``.  The 12-dim error state is ordered
``(d_rho, d_phi, d_nu, d_omega)`` and obeys

    d/dt dx = [[ad(w), I], [0, 0]] dx + [0; eta],   eta ~ N(0, Q),

so the transition over ``dt`` is ``[[Ad(exp(dt w)), dt J(dt w)], [0, I]]``
with ``J`` the left Jacobian of SE(3).  Pose measurements enter as
``Y = exp(eta^) T`` and the innovation is ``Y (-) u``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import se3
from .errors import SingularInnovation

GATE_PX = {"points": 2.5, "edges": 5.0}
SMALL_ROTATION_LIMIT = 0.5
COND_MAX = 1e12


@dataclass(frozen=True)
class ProcessNoise:
    """Spectral densities of the twist random walk, per axis."""

    sigma2_nu: float = 1e-6
    sigma2_omega: float = 1e-8

    def __post_init__(self):
        if self.sigma2_nu < 0 or self.sigma2_omega < 0:
            raise ValueError("process noise densities must be non-negative")

    @property
    def Q(self):
        return np.diag([self.sigma2_nu] * 3 + [self.sigma2_omega] * 3)

    def scaled(self, k):
        return ProcessNoise(k * self.sigma2_nu, k * self.sigma2_omega)


@dataclass
class FilterState:
    pose: object  # se3.Pose or se3.QuatPose
    twist: np.ndarray
    P: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.twist = np.asarray(self.twist, dtype=float).reshape(6)
        self.P = _sym(np.asarray(self.P, dtype=float))
        if self.P.shape != (12, 12):
            raise ValueError("covariance must be 12x12")


@dataclass
class PoseMeasurement:
    pose: object
    R: np.ndarray
    source: str = "points"
    rmse: float = 0.0

    def __post_init__(self):
        self.R = _sym(np.asarray(self.R, dtype=float))


def _sym(A):
    return 0.5 * (A + A.T)


def initial_covariance(pos_sigma, att_sigma, vel_sigma, rate_sigma):
    """Diagonal prior over (rho, phi, nu, omega); scalars or 3-vectors."""
    parts = [np.broadcast_to(np.asarray(s, dtype=float), (3,)) for s in (pos_sigma, att_sigma, vel_sigma, rate_sigma)]
    return np.diag(np.concatenate(parts) ** 2)


def stm(twist, dt):
    """12x12 error-state transition matrix over ``dt`` at constant ``twist``."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    xi = dt * np.asarray(twist, dtype=float)
    Phi = np.eye(12)
    Phi[:6, :6] = se3.adjoint(se3.exp_se3(xi))
    Phi[:6, 6:] = dt * se3.left_jacobian_se3(xi)
    return Phi


def _series_blocks(twist):
    """Coefficients C_k of tau J(tau w) ~ sum_k C_k tau^k, truncated at tau^3."""
    a = se3.ad_se3(np.asarray(twist, dtype=float))
    return [(1, np.eye(6)), (2, a / 2.0), (3, a @ a / 6.0)]


def process_noise(twist, dt, q: ProcessNoise, floor=True):
    """Discrete process noise over ``dt``.

    The pose/velocity coupling ``tau J(tau w)`` is replaced by its Taylor
    polynomial through ``tau^3`` (valid for small inter-frame rotation) and
    the covariance integral is then evaluated exactly, term by term.  Being
    the integral of a Gram matrix the result is PSD by construction; a
    symmetrization and eigenvalue floor at zero guard against rounding
    (``floor=False`` returns the matrix before the floor).
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    twist = np.asarray(twist, dtype=float)
    if dt * np.linalg.norm(twist[3:]) >= SMALL_ROTATION_LIMIT:
        warnings.warn("dt*|omega| is large; truncated process noise may be inaccurate", RuntimeWarning)
    Q = q.Q
    C = _series_blocks(twist)
    G = np.zeros((12, 12))
    for j, Cj in C:
        for k, Ck in C:
            p = j + k + 1
            G[:6, :6] += Cj @ Q @ Ck.T * dt**p / p
        G[:6, 6:] += Cj @ Q * dt ** (j + 1) / (j + 1)
    G[6:, :6] = G[:6, 6:].T
    G[6:, 6:] = Q * dt
    G = _sym(G)
    if not floor:
        return G
    w, V = np.linalg.eigh(G)
    if w.min() < 0:
        G = _sym((V * np.clip(w, 0, None)) @ V.T)
    return G


def predict(state: FilterState, dt, q: ProcessNoise) -> FilterState:
    Phi = stm(state.twist, dt)
    Gam = process_noise(state.twist, dt, q)
    return FilterState(state.pose.oplus(dt * state.twist), state.twist.copy(),
                       Phi @ state.P @ Phi.T + Gam, state.t + dt)


H = np.hstack([np.eye(6), np.zeros((6, 6))])


def innovation(state: FilterState, meas: PoseMeasurement):
    return _ominus(meas.pose, state.pose)


def nis(state: FilterState, meas: PoseMeasurement):
    """Normalized innovation squared, chi-square with 6 dof when consistent."""
    ups = innovation(state, meas)
    S = _sym(state.P[:6, :6] + meas.R)
    return float(ups @ np.linalg.solve(S, ups))


def _ominus(a, b):
    # both parameterizations implement ominus(other) = log(a b^-1)
    if isinstance(a, se3.QuatPose) and not isinstance(b, se3.QuatPose):
        a = a.to_pose()
    if isinstance(b, se3.QuatPose) and not isinstance(a, se3.QuatPose):
        a = se3.QuatPose.from_pose(a)
    return a.ominus(b)


def _gain(P, Hm, R):
    S = _sym(Hm @ P @ Hm.T + R)
    if not np.all(np.isfinite(S)) or np.linalg.cond(S) > COND_MAX:
        raise SingularInnovation("innovation covariance is singular")
    return np.linalg.solve(S, Hm @ P).T


def _inject(state, dx, P):
    return FilterState(state.pose.oplus(dx[:6]), state.twist + dx[6:], P, state.t)


def correct(state: FilterState, meas: PoseMeasurement) -> FilterState:
    """EKF update with ``H = [I 0]``, Joseph-form covariance, error reset."""
    ups = innovation(state, meas)
    K = _gain(state.P, H, meas.R)
    IKH = np.eye(12) - K @ H
    P = IKH @ state.P @ IKH.T + K @ meas.R @ K.T
    return _inject(state, K @ ups, P)


def correct_batch(state: FilterState, measurements) -> FilterState:
    """Fuse several pose measurements at once with block-diagonal noise."""
    ms = list(measurements)
    if not ms:
        return state
    Hm = np.vstack([H] * len(ms))
    R = np.zeros((6 * len(ms), 6 * len(ms)))
    for i, m in enumerate(ms):
        R[6 * i:6 * i + 6, 6 * i:6 * i + 6] = m.R
    ups = np.concatenate([innovation(state, m) for m in ms])
    K = _gain(state.P, Hm, R)
    IKH = np.eye(12) - K @ Hm
    P = IKH @ state.P @ IKH.T + K @ R @ K.T
    return _inject(state, K @ ups, P)


def gate(meas: PoseMeasurement, threshold_px=None) -> bool:
    """Accept iff the fit RMSE is within the threshold for the measurement's source."""
    if threshold_px is None:
        threshold_px = GATE_PX
    limit = threshold_px[meas.source] if isinstance(threshold_px, dict) else threshold_px
    return bool(meas.rmse <= limit)


def error_state(state: FilterState, truth_pose, truth_twist):
    """12-vector ``(truth (-) estimate, truth twist - estimated twist)``."""
    return np.concatenate([_ominus(truth_pose, state.pose), np.asarray(truth_twist) - state.twist])


def nees(state: FilterState, truth_pose, truth_twist):
    e = error_state(state, truth_pose, truth_twist)
    return float(e @ np.linalg.solve(state.P, e))


TRACE_COLUMNS = (["t"] + [f"pose_err_{i}" for i in range(6)] + [f"twist_err_{i}" for i in range(6)]
                 + ["trace_P", "points", "edges"])


@dataclass
class TraceRow:
    t: float
    pose_err: np.ndarray
    twist_err: np.ndarray
    trace_P: float
    status: dict = field(default_factory=dict)  # source -> "accepted" | "rejected" | "absent"

    def as_list(self):
        return ([repr(float(self.t))] + [repr(float(x)) for x in self.pose_err]
                + [repr(float(x)) for x in self.twist_err] + [repr(float(self.trace_P))]
                + [self.status.get("points", "absent"), self.status.get("edges", "absent")])


def write_trace(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for r in rows:
            w.writerow(r.as_list())
