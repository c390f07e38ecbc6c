"""Numerical self-checks against independent oracles.

Each check compares a closed form with something computed a different way
(matrix exponential series, finite differences, Runge-Kutta integration,
adaptive quadrature) and reports the worst deviation against a fixed
tolerance.  ``perturb`` deliberately corrupts a quantity under test so the
report can be shown to catch it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import integrate
from scipy.linalg import expm

from . import ekf, se3
from .camera import Intrinsics, line_jacobian, line_residual, line_through, point_jacobian, project


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    seconds: float
    detail: str = ""

    def line(self):
        flag = "PASS" if self.passed else "FAIL"
        return f"{flag}  {self.name:<28s} {self.value:.3e} (tol {self.tolerance:.0e}) {self.detail} [{self.seconds:.2f}s]"


def _fd_jacobian(f, T, h=1e-6):
    cols = []
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        cols.append((np.atleast_1d(f(T.oplus(e))) - np.atleast_1d(f(T.oplus(-e)))) / (2 * h))
    return np.column_stack(cols)


def _rel(A, B):
    return float(np.abs(A - B).max() / max(np.abs(B).max(), 1e-12))


def _camera_instance(rng):
    K = Intrinsics(rng.uniform(200, 900), rng.uniform(200, 900), rng.uniform(200, 400), rng.uniform(150, 300))
    R = se3.random_rotation(rng)
    t = rng.normal(size=3)
    pc = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 10)])
    return K, se3.Pose(R, t, check=False), R.T @ (pc - t)


def exp_log_roundtrip(n=10_000, seed=0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        xi = np.concatenate([rng.normal(scale=3, size=3), axis * rng.uniform(0, np.pi - 0.1)])
        worst = max(worst, float(np.linalg.norm(se3.log_se3(se3.exp_se3(xi)) - xi)))
    return worst


def exp_against_expm(n=200, seed=1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        xi = rng.normal(size=6)
        worst = max(worst, float(np.abs(se3.exp_se3(xi).matrix() - expm(se3.hat6(xi))).max()))
    return worst


def adjoint_homomorphism(n=1000, seed=2):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        A = se3.random_pose(rng, t_scale=5)
        B = se3.random_pose(rng, t_scale=5)
        worst = max(worst, float(np.abs(se3.adjoint(A @ B) - se3.adjoint(A) @ se3.adjoint(B)).max()))
    return worst


def quaternion_path(n=1000, seed=3):
    """Quaternion and matrix parameterizations under the same perturbation."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        T = se3.random_pose(rng, t_scale=5)
        xi = rng.normal(size=6)
        Q = se3.QuatPose.from_pose(T)
        worst = max(worst, float(np.abs(Q.oplus(xi).matrix() - T.oplus(xi).matrix()).max()))
    return worst


def point_jacobian_fd(n=1000, seed=4):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        K, T, p = _camera_instance(rng)
        worst = max(worst, _rel(point_jacobian(K, T, p), _fd_jacobian(lambda g: project(K, g, p), T)))
    return worst


def line_jacobian_fd(n=1000, seed=5):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        K, T, p = _camera_instance(rng)
        l = line_through(*rng.uniform(0, 640, (2, 2)))
        fd = _fd_jacobian(lambda g: line_residual(l, K, g, p), T)[0]
        worst = max(worst, _rel(line_jacobian(l, K, T, p), fd))
    return worst


def _error_dynamics(twist):
    F = np.zeros((12, 12))
    F[:6, :6] = se3.ad_se3(twist)
    F[:6, 6:] = np.eye(6)
    return F


def _rk4(F, dt, steps=100):
    h = dt / steps
    X = np.eye(12)
    for _ in range(steps):
        k1 = F @ X
        k2 = F @ (X + h / 2 * k1)
        k3 = F @ (X + h / 2 * k2)
        k4 = F @ (X + h * k3)
        X = X + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return X


def _bounded_twist(rng, w_max):
    w = np.concatenate([rng.normal(scale=0.5, size=3), rng.normal(size=3)])
    w[3:] *= rng.uniform(0, w_max) / np.linalg.norm(w[3:])
    return w


def stm_rk4(n=50, dt=0.1, seed=6, w_max=0.1):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        w = _bounded_twist(rng, w_max)
        worst = max(worst, float(np.abs(ekf.stm(w, dt) - _rk4(_error_dynamics(w), dt)).max()))
    return worst


def gamma_quadrature(twist, dt, q):
    """Adaptive quadrature of the continuous process-noise integral."""
    GQG = np.zeros((12, 12))
    GQG[6:, 6:] = q.Q
    F = _error_dynamics(twist)

    def integrand(s):
        Phi = expm((dt - s) * F)
        return (Phi @ GQG @ Phi.T).ravel()

    val, _ = integrate.quad_vec(integrand, 0.0, dt, epsabs=1e-22, epsrel=1e-12)
    return val.reshape(12, 12)


def gamma_vs_quadrature(n=10, dt=0.1, seed=7, scale=1.0):
    rng = np.random.default_rng(seed)
    q = ekf.ProcessNoise(1e-4, 1e-6)
    worst = 0.0
    for _ in range(n):
        w = np.concatenate([rng.normal(scale=0.2, size=3), rng.normal(size=3)])
        w[3:] *= np.radians(3.5) / np.linalg.norm(w[3:])
        G = scale * ekf.process_noise(w, dt, q)
        ref = gamma_quadrature(w, dt, q)
        worst = max(worst, float(np.linalg.norm(G - ref) / np.linalg.norm(ref)))
    return worst


def gamma_min_eigenvalue(n=1000, seed=8):
    rng = np.random.default_rng(seed)
    worst = np.inf
    for _ in range(n):
        w = np.concatenate([rng.normal(size=3), rng.normal(scale=0.5, size=3)])
        q = ekf.ProcessNoise(*rng.uniform(0, 1e-2, 2))
        worst = min(worst, float(np.linalg.eigvalsh(ekf.process_noise(w, rng.uniform(1e-3, 0.2), q, floor=False)).min()))
    return worst


CHECKS = (
    # name, function, tolerance, comparison
    ("exp/log roundtrip", exp_log_roundtrip, 1e-9, "max"),
    ("exp vs expm", exp_against_expm, 1e-12, "max"),
    ("adjoint homomorphism", adjoint_homomorphism, 1e-10, "max"),
    ("quaternion path", quaternion_path, 1e-9, "max"),
    ("point jacobian fd", point_jacobian_fd, 1e-5, "max"),
    ("line jacobian fd", line_jacobian_fd, 1e-5, "max"),
    ("transition vs rk4", stm_rk4, 1e-6, "max"),
    ("process noise vs quadrature", gamma_vs_quadrature, 1e-3, "max"),
    ("process noise min eigenvalue", gamma_min_eigenvalue, -1e-12, "min"),
)


def run_checks(names=None, perturb=None):
    """Run the oracle suite; ``perturb={"gamma_scale": s}`` scales the process noise under test."""
    perturb = perturb or {}
    out = []
    for name, fn, tol, kind in CHECKS:
        if names is not None and name not in names:
            continue
        kw = {}
        if fn is gamma_vs_quadrature and "gamma_scale" in perturb:
            kw["scale"] = float(perturb["gamma_scale"])
        t0 = time.perf_counter()
        value = fn(**kw)
        dt = time.perf_counter() - t0
        ok = value < tol if kind == "max" else value >= tol
        out.append(CheckResult(name, value, tol, bool(ok), dt, "" if kind == "max" else "(lower bound)"))
    return out
