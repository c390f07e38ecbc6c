import numpy as np
import pytest

from relnav import se3
from relnav.camera import (Intrinsics, project, point_jacobian, line_residual,
                           line_jacobian, normalize_line, line_through)
from relnav.errors import BehindCamera
from relnav.se3 import Pose

K100 = Intrinsics(100.0, 100.0, 320.0, 240.0)


def homogeneous_oracle(K, T, p):
    P = K.K @ np.hstack([T.R, T.t[:, None]])
    zh = P @ np.append(p, 1.0)
    return zh[:2] / zh[2]


def random_instance(rng):
    K = Intrinsics(rng.uniform(200, 900), rng.uniform(200, 900), rng.uniform(200, 400), rng.uniform(150, 300))
    T = Pose(se3.random_rotation(rng), [0, 0, 0], check=False)
    pc = np.array([rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(3, 10)])
    # pick the model point so that its camera-frame image is pc
    T = Pose(T.R, rng.normal(size=3), check=False)
    p = T.R.T @ (pc - T.t)
    return K, T, p


def fd_jacobian(f, T, h=1e-6):
    cols = []
    for i in range(6):
        e = np.zeros(6)
        e[i] = h
        cols.append((np.atleast_1d(f(T.oplus(e))) - np.atleast_1d(f(T.oplus(-e)))) / (2 * h))
    return np.column_stack(cols)


def test_project_examples():
    I = Pose.identity()
    np.testing.assert_allclose(project(K100, I, [0, 0, 1]), [320, 240])
    np.testing.assert_allclose(project(K100, I, [0.1, 0, 1]), [330, 240])
    rng = np.random.default_rng(0)
    for _ in range(100):
        K, T, p = random_instance(rng)
        np.testing.assert_allclose(project(K, T, p), homogeneous_oracle(K, T, p), rtol=1e-12)


def test_behind_camera_raises():
    with pytest.raises(BehindCamera):
        project(K100, Pose.identity(), [0, 0, -1])
    with pytest.raises(BehindCamera):
        point_jacobian(K100, Pose.identity(), [0, 0, 1e-7])
    with pytest.raises(BehindCamera):
        project(K100, Pose.identity(), [[0, 0, 1], [0, 0, 0]])


def test_point_jacobian_closed_form_entry():
    K1 = Intrinsics(1.0, 1.0, 0.0, 0.0)
    J = point_jacobian(K1, Pose.identity(), [0, 0, 1])
    np.testing.assert_allclose(J, [[1, 0, 0, 0, 1, 0], [0, 1, 0, -1, 0, 0]])


def test_point_jacobian_depth_scaling():
    p = np.array([0.3, -0.2, 2.0])
    J1 = point_jacobian(K100, Pose.identity(), p)
    J2 = point_jacobian(K100, Pose.identity(), p * np.array([1, 1, 2]))
    np.testing.assert_allclose(J2[0, 0], J1[0, 0] / 2)
    np.testing.assert_allclose(J2[1, 1], J1[1, 1] / 2)


def rel_err(A, B):
    return np.abs(A - B).max() / max(np.abs(B).max(), 1e-12)


def test_point_jacobian_finite_differences_bulk():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        K, T, p = random_instance(rng)
        J = point_jacobian(K, T, p)
        Jfd = fd_jacobian(lambda g: project(K, g, p), T)
        worst = max(worst, rel_err(J, Jfd))
    assert worst < 1e-5


def test_first_order_remainder_is_quadratic():
    rng = np.random.default_rng(2)
    K, T, p = random_instance(rng)
    xi = rng.normal(size=6)
    J = point_jacobian(K, T, p)
    eps = np.array([1e-2, 5e-3, 2.5e-3, 1.25e-3])
    rem = [np.linalg.norm(project(K, T.oplus(e * xi), p) - project(K, T, p) - e * J @ xi) for e in eps]
    orders = np.log2(np.array(rem[:-1]) / np.array(rem[1:]))
    assert np.all(np.abs(orders - 2.0) < 0.1)


def test_vectorized_matches_scalar():
    rng = np.random.default_rng(3)
    K, T, _ = random_instance(rng)
    pts = T.inverse().apply(np.column_stack([rng.uniform(-1, 1, (20, 2)), rng.uniform(4, 8, 20)]))
    Z = project(K, T, pts)
    J = point_jacobian(K, T, pts)
    for i in range(20):
        np.testing.assert_allclose(Z[i], project(K, T, pts[i]))
        np.testing.assert_allclose(J[i], point_jacobian(K, T, pts[i]))


def test_line_residual_examples():
    I = Pose.identity()
    horiz = normalize_line([0, 1, -240])
    # point that projects to (320, 250)
    assert line_residual(horiz, K100, I, [0, 0.1, 1]) == pytest.approx(10.0)
    assert line_residual(horiz, K100, I, [0.5, 0, 1]) == pytest.approx(0.0, abs=1e-12)
    # arbitrary scale of l does not matter
    assert line_residual([0, 7, -7 * 240], K100, I, [0, 0.1, 1]) == pytest.approx(10.0)


def test_line_residual_distance_oracle():
    rng = np.random.default_rng(4)
    for _ in range(200):
        K, T, p = random_instance(rng)
        a, b = rng.uniform(0, 640, (2, 2))
        l = line_through(a, b)
        z = project(K, T, p)
        d = b - a
        signed = ((z[0] - a[0]) * d[1] - (z[1] - a[1]) * d[0]) / np.linalg.norm(d)
        assert abs(abs(line_residual(l, K, T, p)) - abs(signed)) < 1e-9


def test_line_jacobian():
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(1000):
        K, T, p = random_instance(rng)
        l = line_through(*rng.uniform(0, 640, (2, 2)))
        Jl = line_jacobian(l, K, T, p)
        np.testing.assert_allclose(Jl, l[:2] @ point_jacobian(K, T, p), rtol=1e-14, atol=1e-12)
        Jfd = fd_jacobian(lambda g: line_residual(l, K, g, p), T)[0]
        worst = max(worst, rel_err(Jl, Jfd))
    assert worst < 1e-5


def test_line_jacobian_on_axis():
    # point on the optical axis, line through the principal point; the
    # jacobian component along the translational axis is orthogonal to (l1, l2)
    l = normalize_line([1.0, 0.0, -320.0])
    p = np.array([0, 0, 5.0])
    J = line_jacobian(l, K100, Pose.identity(), p)
    Jfd = fd_jacobian(lambda g: line_residual(l, K100, g, p), Pose.identity())[0]
    np.testing.assert_allclose(J, Jfd, atol=1e-6)
    assert J[1] == 0.0 and J[2] == 0.0 and J[3] == 0.0


def test_from_fov():
    K = Intrinsics.from_fov(640, 480, 53.06, 36.82)
    assert K.fx == pytest.approx(641.0, abs=1.0)
    assert K.fy == pytest.approx(721.0, abs=1.0)
    with pytest.raises(ValueError):
        Intrinsics(-1, 1, 0, 0)
