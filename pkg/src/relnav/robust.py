"""Robust pose refinement: Levenberg-Marquardt on SE(3) with M-estimators.

Three estimation schemes share one damped Gauss-Newton core:

* least squares (``loss="ls"``);
* Huber's joint estimation of pose and scale, which feeds psi-modified
  residuals to the normal equations and rescales sigma after every step;
* IRLS with weights ``w(r / sigma)``, sigma fixed, estimated by MAD for the
  first few iterations, or updated with Huber's rule.

Residuals are ``r = h(u) - a`` in pixels and Jacobians are taken with
respect to a left perturbation, so accepted steps apply ``u <- u (+) du``.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import se3
from .camera import Intrinsics, line_jacobian, line_residual, point_jacobian, project
from .errors import DidNotConverge, RankDeficient

HUBER_C = 1.345
TUKEY_C = 4.685
MAD_K = 1.4826
# E[psi_Huber(X)^2] for X ~ N(0, 1) and c = 1.345:
#   (2 Phi(c) - 1) - 2 c phi(c) + 2 c^2 (1 - Phi(c)); checked by quadrature in the tests.
HUBER_BETA = 0.7101645482690486
COND_MAX = 1e12


def loss_huber(x, c=HUBER_C):
    """Huber loss: returns ``(rho, psi, w)`` elementwise."""
    x = np.asarray(x, dtype=float)
    a = np.abs(x)
    core = a <= c
    rho = np.where(core, 0.5 * x * x, c * a - 0.5 * c * c)
    psi = np.where(core, x, c * np.sign(x))
    w = np.where(core, 1.0, c / np.where(core, 1.0, a))
    return rho, psi, w


def loss_tukey(x, c=TUKEY_C):
    """Tukey biweight: returns ``(rho, psi, w)``; zero influence beyond ``c``."""
    x = np.asarray(x, dtype=float)
    inside = np.abs(x) <= c
    u = np.where(inside, 1.0 - (x / c) ** 2, 0.0)
    rho = np.where(inside, c * c / 6.0 * (1.0 - u**3), c * c / 6.0)
    w = u * u
    psi = x * w
    return rho, psi, w


def loss_ls(x, c=None):
    x = np.asarray(x, dtype=float)
    return 0.5 * x * x, x, np.ones_like(x)


LOSSES = {"ls": loss_ls, "huber": loss_huber, "tukey": loss_tukey}


def mad_scale(r):
    r = np.asarray(r, dtype=float)
    return MAD_K * float(np.median(np.abs(r - np.median(r))))


def rmse(residuals):
    r = np.asarray(residuals, dtype=float)
    return float(np.sqrt(np.mean(r * r)))


@dataclass
class ResidualProblem:
    """Stacked residuals and their tangent-space Jacobian.

    ``groups[i]`` names the correspondence residual row ``i`` belongs to;
    inlier masks are reported per correspondence.
    """

    residual: Callable
    jacobian: Callable
    groups: Optional[np.ndarray] = None

    def evaluate(self, u):
        return np.asarray(self.residual(u), dtype=float), np.asarray(self.jacobian(u), dtype=float)


def point_problem(K: Intrinsics, model_points, image_points):
    """Reprojection residuals ``project(u, p_i) - z_i``, two rows per point."""
    P = np.asarray(model_points, dtype=float)
    Z = np.asarray(image_points, dtype=float)

    def res(u):
        return (project(K, u, P) - Z).reshape(-1)

    def jac(u):
        return point_jacobian(K, u, P).reshape(-1, 6)

    return ResidualProblem(res, jac, np.repeat(np.arange(len(P)), 2))


def line_problem(K: Intrinsics, model_points, lines):
    """Signed point-to-line distances, one row per 2D-3D line correspondence."""
    P = np.asarray(model_points, dtype=float)
    L = np.asarray(lines, dtype=float)

    def res(u):
        return line_residual(L, K, u, P)

    def jac(u):
        return line_jacobian(L, K, u, P)

    return ResidualProblem(res, jac, np.arange(len(P)))


def stack_problems(*problems):
    """Concatenate residual problems; group ids are kept disjoint."""
    offsets = []
    total = 0
    for p in problems:
        offsets.append(total)
        total += 0 if p.groups is None or len(p.groups) == 0 else int(p.groups.max()) + 1

    def res(u):
        return np.concatenate([p.residual(u) for p in problems])

    def jac(u):
        return np.vstack([p.jacobian(u) for p in problems])

    groups = np.concatenate([p.groups + o for p, o in zip(problems, offsets)])
    return ResidualProblem(res, jac, groups)


@dataclass
class RobustConfig:
    loss: str = "huber"           # ls | huber | tukey
    scale: str = "huber"          # fixed | mad | huber
    c: Optional[float] = None     # tuning constant (defaults per loss)
    sigma: float = 1.0            # fixed / initial scale, pixels
    sigma_floor: float = 0.0      # lower bound on an estimated scale, pixels
    mad_iterations: int = 1
    max_iter: int = 50
    lambda_factor: float = 1e-3
    tol_step: float = 1e-10
    tol_cost: float = 1e-10
    tukey_polish: int = 0         # extra IRLS iterations with Tukey and frozen sigma
    strict: bool = False          # raise DidNotConverge at the iteration cap
    record: bool = False          # keep per-iteration pose/sigma history

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.scale not in ("fixed", "mad", "huber"):
            raise ValueError(f"unknown scale mode {self.scale!r}")
        if self.c is None:
            self.c = {"ls": 1.0, "huber": HUBER_C, "tukey": TUKEY_C}[self.loss]
        if self.c <= 0:
            raise ValueError("tuning constant must be positive")


@dataclass
class PoseEstimate:
    pose: se3.Pose
    covariance: np.ndarray
    sigma: float
    inliers: np.ndarray
    rmse: float
    iterations: int = 0
    converged: bool = True
    cost: float = 0.0
    history: list = field(default_factory=list, repr=False)


def covariance_backprop(J, sigma, rows=None):
    """``sigma^2 (J^T J)^-1`` over the selected rows, symmetrized.

    Raises RankDeficient if the information matrix is singular.
    """
    J = np.asarray(J, dtype=float)
    if rows is not None:
        J = J[np.asarray(rows)]
    A = J.T @ J
    if J.shape[0] < J.shape[1] or np.linalg.cond(A) > COND_MAX:
        raise RankDeficient("information matrix is singular or ill-conditioned")
    C = sigma * sigma * np.linalg.inv(A)
    return 0.5 * (C + C.T)


def _check_rank(J, w=None):
    if J.shape[0] <= 6:
        raise RankDeficient(f"{J.shape[0]} residual rows cannot constrain 6 pose parameters")
    A = J.T @ J if w is None else (J * w[:, None]).T @ J
    if not np.all(np.isfinite(A)) or np.linalg.cond(A) > COND_MAX:
        raise RankDeficient("normal equations are ill-conditioned")
    return A


def _solve_lm(problem, u0, cfg: RobustConfig, sigma0, joint=False, iter_budget=None):
    """Shared damped iteration.  Returns (pose, sigma, iterations, converged, cost, history).

    With ``joint`` the normal equations use psi-modified residuals
    ``J^T J du = -J^T psi(r / sigma) sigma``; otherwise they are IRLS-weighted.
    """
    loss = LOSSES[cfg.loss]
    c = cfg.c
    u = u0
    r, J = problem.evaluate(u)
    n = len(r)
    sigma = float(sigma0)
    if cfg.scale == "mad" and cfg.mad_iterations > 0:
        sigma = max(mad_scale(r), cfg.sigma_floor, 1e-12)

    def robust_cost(res, s):
        return float(np.sum(loss(res / s, c)[0]) * s * s)

    cost = robust_cost(r, sigma)
    lam = None
    history = [(u, sigma)] if cfg.record else []
    converged = False
    budget = cfg.max_iter if iter_budget is None else iter_budget
    it = 0
    while it < budget:
        it += 1
        x = r / sigma
        _, psi, w = loss(x, c)
        if joint:
            A = _check_rank(J)
            g = J.T @ (psi * sigma)
        else:
            A = _check_rank(J, w)
            g = J.T @ (w * r)
        if lam is None:
            lam = cfg.lambda_factor * float(np.mean(np.diag(A)))
        accepted = False
        while not accepted:
            delta = np.linalg.solve(A + lam * np.eye(6), -g)
            cand = u.oplus(delta)
            r_new, J_new = problem.evaluate(cand)
            new_cost = robust_cost(r_new, sigma)
            if new_cost <= cost:
                accepted = True
                lam = max(lam / 10.0, 1e-300)
            else:
                lam *= 10.0
                if lam > 1e20 * max(1.0, float(np.mean(np.diag(A)))):
                    break
        if not accepted:
            converged = True  # no descent direction left: at a minimum
            break
        rel_change = abs(cost - new_cost) / max(cost, 1e-300)
        u, r, J = cand, r_new, J_new
        step_small = np.linalg.norm(delta) < cfg.tol_step
        # scale update for the next iteration
        if cfg.scale == "huber":
            _, psi_new, _ = loss_huber(r / sigma, HUBER_C)
            sigma = float(np.sqrt(np.sum(psi_new**2) * sigma * sigma / ((n - 6) * HUBER_BETA)))
            sigma = max(sigma, cfg.sigma_floor, 1e-300)
        elif cfg.scale == "mad" and it < cfg.mad_iterations:
            sigma = max(mad_scale(r), cfg.sigma_floor, 1e-12)
        cost = robust_cost(r, sigma)
        if cfg.record:
            history.append((u, sigma))
        if step_small or rel_change < cfg.tol_cost or cost == 0.0:
            converged = True
            break
    return u, sigma, it, converged, cost, history


def _finish(problem, u, sigma, it, converged, cost, history, cfg, cutoff=TUKEY_C):
    r, J = problem.evaluate(u)
    groups = problem.groups if problem.groups is not None else np.arange(len(r))
    row_ok = np.abs(r) <= cutoff * max(sigma, 1e-12)
    n_groups = int(groups.max()) + 1 if len(groups) else 0
    bad = np.zeros(n_groups, bool)
    np.logical_or.at(bad, groups, ~row_ok)
    inliers = ~bad
    rows = inliers[groups]
    try:
        cov = covariance_backprop(J, sigma, rows if rows.sum() > 6 else None)
    except RankDeficient:
        cov = np.full((6, 6), np.nan)
    est = PoseEstimate(u, cov, sigma, inliers, rmse(r[rows]) if rows.any() else rmse(r),
                       it, converged, cost, history)
    if not converged and cfg.strict:
        raise DidNotConverge(f"no convergence within {cfg.max_iter} iterations", est)
    return est


def lm_minimize(problem, u0, config: RobustConfig | None = None):
    """Minimize the (robust) cost from ``u0``; least squares by default."""
    cfg = config or RobustConfig(loss="ls", scale="fixed")
    if cfg.loss == "huber" and cfg.scale == "huber":
        return huber_joint_fit(problem, u0, cfg)
    if cfg.loss != "ls":
        return irls_fit(problem, u0, cfg)
    out = _solve_lm(problem, u0, cfg, cfg.sigma)
    u, sigma = out[0], out[1]
    r, _ = problem.evaluate(u)
    # report the residual scale when it is not fixed by the caller
    if cfg.scale != "fixed":
        sigma = max(rmse(r), 1e-300)
    return _finish(problem, u, sigma, *out[2:], cfg, cutoff=np.inf)


def huber_joint_fit(problem, u0, config: RobustConfig | None = None):
    """Huber's joint pose/scale estimate, optionally polished with Tukey IRLS."""
    cfg = config or RobustConfig()
    cfg = replace(cfg, loss="huber", scale="huber")
    u, sigma, it, conv, cost, hist = _solve_lm(problem, u0, cfg, cfg.sigma, joint=True)
    if cfg.tukey_polish > 0:
        pcfg = replace(cfg, loss="tukey", scale="fixed", c=TUKEY_C, max_iter=cfg.tukey_polish)
        u, _, it2, _, cost, hist2 = _solve_lm(problem, u, pcfg, sigma)
        it += it2
        hist += hist2
    return _finish(problem, u, sigma, it, conv, cost, hist, cfg)


def irls_fit(problem, u0, config: RobustConfig | None = None):
    """IRLS with a fixed, MAD-initialized or Huber-updated scale."""
    cfg = config or RobustConfig(loss="huber", scale="fixed")
    out = _solve_lm(problem, u0, cfg, cfg.sigma)
    u, sigma, it, conv, cost, hist = out
    if cfg.tukey_polish > 0:
        pcfg = replace(cfg, loss="tukey", scale="fixed", c=TUKEY_C, max_iter=cfg.tukey_polish)
        u, _, it2, _, cost, hist2 = _solve_lm(problem, u, pcfg, sigma)
        it += it2
        hist += hist2
    return _finish(problem, u, sigma, it, conv, cost, hist, cfg)


# ---------------------------------------------------------------------------
# scale-estimation benchmark on a random cube of points

BENCH_METHODS = ("ls", "huber", "irls_sigma1", "irls_mad1", "irls_mad3", "irls_huber_sigma")


@dataclass
class BenchmarkConfig:
    outlier_fractions: tuple = (0.1, 0.2, 0.3)
    trials: int = 100
    n_points: int = 60
    cube_size: float = 1.0
    depth: float = 4.0
    noise_px: float = 1.0
    outlier_px: float = 50.0
    outlier_mode: str = "uniform"  # uniform: anywhere in the image; offset: fixed-length push
    rot_sigma: float = 0.2
    trans_sigma: float = 0.3
    iterations: int = 50
    seed: int = 0
    camera: Intrinsics = field(default_factory=lambda: Intrinsics(800.0, 800.0, 320.0, 240.0, 640, 480))


def method_config(name, iterations=50):
    base = dict(max_iter=iterations, record=True)
    if name == "ls":
        return RobustConfig(loss="ls", scale="fixed", **base)
    if name == "huber":
        return RobustConfig(loss="huber", scale="huber", **base)
    if name == "irls_sigma1":
        return RobustConfig(loss="huber", scale="fixed", sigma=1.0, **base)
    if name == "irls_mad1":
        return RobustConfig(loss="huber", scale="mad", mad_iterations=1, **base)
    if name == "irls_mad3":
        return RobustConfig(loss="huber", scale="mad", mad_iterations=3, **base)
    if name == "irls_huber_sigma":
        return RobustConfig(loss="huber", scale="huber", **base)
    raise ValueError(f"unknown method {name!r}")


def run_method(name, problem, u0, iterations=50):
    cfg = method_config(name, iterations)
    if name == "irls_huber_sigma":
        return irls_fit(problem, u0, cfg)
    if name == "huber":
        return huber_joint_fit(problem, u0, cfg)
    if name == "ls":
        return lm_minimize(problem, u0, cfg)
    return irls_fit(problem, u0, cfg)


def cube_instance(rng, cfg: BenchmarkConfig, outlier_fraction):
    """Random cube scene: (true pose, model points, observations, outlier mask, initial pose)."""
    K = cfg.camera
    while True:
        R = se3.random_rotation(rng)
        T_true = se3.Pose(R, np.array([0.0, 0.0, cfg.depth]), check=False)
        pts = rng.uniform(-0.5, 0.5, size=(cfg.n_points, 3)) * cfg.cube_size
        z = project(K, T_true, pts)
        inside = (z[:, 0] >= 0) & (z[:, 0] < K.width) & (z[:, 1] >= 0) & (z[:, 1] < K.height)
        pts, z = pts[inside], z[inside]
        if len(pts) >= 10:
            break
    z = z + rng.normal(scale=cfg.noise_px, size=z.shape)
    n_out = int(np.floor(outlier_fraction * len(pts)))
    out = np.zeros(len(pts), bool)
    out[rng.choice(len(pts), n_out, replace=False)] = True
    if cfg.outlier_mode == "uniform":
        z[out] = rng.uniform([0, 0], [K.width, K.height], size=(n_out, 2))
    else:
        ang = rng.uniform(0, 2 * np.pi, n_out)
        z[out] += cfg.outlier_px * np.column_stack([np.cos(ang), np.sin(ang)])
    xi = np.concatenate([rng.normal(scale=cfg.trans_sigma, size=3), rng.normal(scale=cfg.rot_sigma, size=3)])
    # perturb about the target centre so rotation and translation errors decouple
    R0 = se3.exp_so3(xi[3:]) @ T_true.R
    T0 = se3.Pose(R0, T_true.t + xi[:3], check=False)
    return T_true, pts, z, out, T0


def pose_errors(T, T_true):
    return (float(np.linalg.norm(T.t - T_true.t)),
            float(se3.rotation_angle(T.R @ T_true.R.T)))


def mest_benchmark(cfg: BenchmarkConfig | None = None, out_dir=None, methods=BENCH_METHODS):
    """Run the six scale-handling strategies on identical seeded cube scenes.

    Returns ``{fraction: {method: array (trials, iterations+1, 3)}}`` holding
    normalized translation error, normalized rotation error and sigma per
    iteration.  With ``out_dir`` one CSV per outlier level is written.
    """
    cfg = cfg or BenchmarkConfig()
    results = {}
    master = np.random.SeedSequence(cfg.seed)
    level_seeds = master.spawn(len(cfg.outlier_fractions))
    for frac, lseed in zip(cfg.outlier_fractions, level_seeds):
        curves = {m: np.zeros((cfg.trials, cfg.iterations + 1, 3)) for m in methods}
        extra = {m: [] for m in methods}
        for trial, tseed in enumerate(lseed.spawn(cfg.trials)):
            rng = np.random.default_rng(tseed)
            T_true, pts, z, out, T0 = cube_instance(rng, cfg, frac)
            problem = point_problem(cfg.camera, pts, z)
            t0, a0 = pose_errors(T0, T_true)
            for m in methods:
                est = run_method(m, problem, T0, cfg.iterations)
                hist = est.history[: cfg.iterations + 1]
                rows = []
                for u, s in hist:
                    te, re = pose_errors(u, T_true)
                    rows.append((te / t0, re / a0, s))
                while len(rows) < cfg.iterations + 1:
                    rows.append(rows[-1])
                curves[m][trial] = rows
                extra[m].append((est.inliers, ~out))
        results[frac] = {"curves": curves, "inliers": extra}
        if out_dir is not None:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, f"mest_outliers_{int(round(frac * 100)):02d}.csv")
            with open(path, "w", newline="") as fh:
                wr = csv.writer(fh)
                wr.writerow(["method", "trial", "iteration", "t_err_norm", "r_err_norm", "sigma_hat"])
                for m in methods:
                    for trial in range(cfg.trials):
                        for k, (te, re, s) in enumerate(curves[m][trial]):
                            wr.writerow([m, trial, k, repr(float(te)), repr(float(re)), repr(float(s))])
    return results
