import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad_vec
from scipy.linalg import expm

from relnav import se3
from relnav.se3 import Pose, QuatPose


def series_expm(A, terms=30):
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, terms):
        term = term @ A / k
        out = out + term
    return out


vec3 = st.lists(st.floats(-3, 3), min_size=3, max_size=3).map(np.array)


def test_hat3_examples():
    assert np.array_equal(se3.hat3([0, 0, 0]), np.zeros((3, 3)))
    assert np.array_equal(se3.hat3([0, 0, 1]), [[0, -1, 0], [1, 0, 0], [0, 0, 0]])


@given(vec3, vec3)
def test_hat3_is_cross(a, b):
    W = se3.hat3(a)
    assert np.allclose(W, -W.T)
    assert np.allclose(W @ b, np.cross(a, b), atol=1e-12)


def test_exp_so3_examples():
    assert np.array_equal(se3.exp_so3([0, 0, 0]), np.eye(3))
    np.testing.assert_allclose(se3.exp_so3([np.pi / 2, 0, 0]),
                               [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)
    phi = np.array([0.3, -0.2, 0.5])
    np.testing.assert_allclose(se3.exp_so3(phi), series_expm(se3.hat3(phi)), atol=1e-12)


def test_log_so3_examples():
    assert np.allclose(se3.log_so3(np.eye(3)), 0)
    np.testing.assert_allclose(se3.log_so3(se3.exp_so3([0.1, 0.2, 0.3])), [0.1, 0.2, 0.3], atol=1e-12)
    ang = np.pi - 1e-4
    v = se3.log_so3(se3.exp_so3([ang, 0, 0]))
    assert abs(np.linalg.norm(v) - ang) < 1e-7
    assert v[0] > 0


@pytest.mark.parametrize("axis", [[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1], [-1, 2, 0.5]])
@pytest.mark.parametrize("eps", [0.0, 1e-9, 1e-6, 1e-3, 0.05])
def test_log_so3_near_pi(axis, eps):
    a = np.array(axis, float)
    a /= np.linalg.norm(a)
    R = se3.exp_so3((np.pi - eps) * a)
    v = se3.log_so3(R)
    np.testing.assert_allclose(se3.exp_so3(v), R, atol=1e-9)
    assert abs(np.linalg.norm(v) - (np.pi - eps)) < 1e-7


def test_exp_se3_examples():
    T = se3.exp_se3(np.zeros(6))
    assert np.allclose(T.matrix(), np.eye(4))
    T = se3.exp_se3([1, 2, 3, 0, 0, 0])
    assert np.allclose(T.R, np.eye(3)) and np.allclose(T.t, [1, 2, 3])
    xi = np.array([1, 0, 0, 0, 0, np.pi / 2])
    np.testing.assert_allclose(se3.exp_se3(xi).matrix(), series_expm(se3.hat6(xi)), atol=1e-12)


def test_log_se3_examples():
    assert np.allclose(se3.log_se3(Pose.identity()), 0)
    xi = se3.log_se3(Pose(np.eye(3), [4, -1, 2]))
    np.testing.assert_allclose(xi, [4, -1, 2, 0, 0, 0], atol=1e-15)


def test_exp_log_se3_roundtrip_bulk():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        phi = axis * rng.uniform(0, np.pi - 0.1)
        xi = np.concatenate([rng.normal(scale=3, size=3), phi])
        worst = max(worst, np.linalg.norm(se3.log_se3(se3.exp_se3(xi)) - xi))
    assert worst < 1e-9


def test_adjoint_examples():
    rng = np.random.default_rng(1)
    assert np.allclose(se3.adjoint(Pose.identity()), np.eye(6))
    t = np.array([1.0, -2.0, 0.5])
    A = se3.adjoint(Pose(np.eye(3), t))
    expected = np.eye(6)
    expected[:3, 3:] = se3.hat3(t)
    assert np.allclose(A, expected)
    for _ in range(20):
        T = se3.random_pose(rng, t_scale=3)
        xi = rng.normal(size=6)
        conj = T.matrix() @ se3.hat6(xi) @ T.inverse().matrix()
        np.testing.assert_allclose(se3.vee6(conj), se3.adjoint(T) @ xi, atol=1e-12)


def test_adjoint_homomorphism():
    rng = np.random.default_rng(2)
    for _ in range(200):
        T1 = se3.random_pose(rng, t_scale=5)
        T2 = se3.random_pose(rng, t_scale=5)
        diff = se3.adjoint(T1 @ T2) - se3.adjoint(T1) @ se3.adjoint(T2)
        assert np.abs(diff).max() < 1e-10


def test_ad_se3_bracket():
    rng = np.random.default_rng(3)
    assert np.allclose(se3.ad_se3(np.zeros(6)), 0)
    x = rng.normal(size=6)
    assert np.allclose(se3.ad_se3(x) @ x, 0)
    for _ in range(20):
        a, b = rng.normal(size=(2, 6))
        A, B = se3.hat6(a), se3.hat6(b)
        np.testing.assert_allclose(se3.hat6(se3.ad_se3(a) @ b), A @ B - B @ A, atol=1e-12)


def test_oplus_ominus():
    rng = np.random.default_rng(4)
    g = se3.random_pose(rng, t_scale=2)
    assert np.allclose(se3.oplus(g, np.zeros(6)).matrix(), g.matrix())
    xi = rng.normal(size=6)
    xi[3:] *= 0.5
    assert np.allclose(se3.oplus(Pose.identity(), xi).matrix(), se3.exp_se3(xi).matrix())
    np.testing.assert_allclose(se3.ominus(se3.oplus(g, xi), g), xi, atol=1e-10)
    np.testing.assert_allclose(se3.oplus(g, xi).matrix(), expm(se3.hat6(xi)) @ g.matrix(), atol=1e-12)
    assert np.allclose(se3.ominus(g, g), 0)
    g1 = se3.random_pose(rng, max_angle=3.0)
    np.testing.assert_allclose(se3.oplus(g, se3.ominus(g1, g)).matrix(), g1.matrix(), atol=1e-9)


def test_pose_inverse_and_immutability():
    rng = np.random.default_rng(5)
    T = se3.random_pose(rng, t_scale=10)
    assert np.allclose((T @ T.inverse()).matrix(), np.eye(4), atol=1e-9)
    assert np.array_equal(T.matrix()[3], [0, 0, 0, 1])
    with pytest.raises(AttributeError):
        T.R = np.eye(3)
    with pytest.raises(ValueError):
        T.R[0, 0] = 2.0
    with pytest.raises(ValueError):
        Pose(np.diag([1, 1, -1.0]))


def test_quaternion_examples():
    assert np.allclose(se3.quat_to_rot([0, 0, 0, 1]), np.eye(3))
    # e = (1,0,0), q = 0: (0 - 1) I + 2 e e^T
    assert np.allclose(se3.quat_to_rot([1, 0, 0, 0]), np.diag([1, -1, -1]))
    rng = np.random.default_rng(6)
    for _ in range(50):
        q = rng.normal(size=4)
        q /= np.linalg.norm(q)
        R = se3.quat_to_rot(q)
        assert np.allclose(R.T @ R, np.eye(3)) and np.isclose(np.linalg.det(R), 1)
        q2 = se3.rot_to_quat(R)
        assert np.allclose(q2, q) or np.allclose(q2, -q)
        # axis-angle of q under this convention is -2 atan2(|e|, q) e/|e|
        np.testing.assert_allclose(R, se3.exp_so3(se3.log_quat(q)), atol=1e-12)


def test_quat_to_rot_literal_formula():
    rng = np.random.default_rng(7)
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    e, s = q[:3], q[3]
    ex = np.array([[0, -e[2], e[1]], [e[2], 0, -e[0]], [-e[1], e[0], 0]])
    expected = (s**2 - e @ e) * np.eye(3) - 2 * s * ex + 2 * np.outer(e, e)
    assert np.array_equal(se3.quat_to_rot(q), expected)


def test_shuster_product():
    rng = np.random.default_rng(8)
    ident = np.array([0, 0, 0, 1.0])
    for _ in range(50):
        q0, q1 = rng.normal(size=(2, 4))
        q0 /= np.linalg.norm(q0)
        q1 /= np.linalg.norm(q1)
        assert np.allclose(se3.shuster_product(q0, ident), q0)
        assert np.allclose(se3.shuster_product(q0, se3.quat_conj(q0)), ident)
        np.testing.assert_allclose(se3.quat_to_rot(se3.shuster_product(q0, q1)),
                                   se3.quat_to_rot(q0) @ se3.quat_to_rot(q1), atol=1e-12)


def test_exp_quat():
    assert np.allclose(se3.exp_quat([0, 0, 0]), [0, 0, 0, 1])
    q = se3.exp_quat([np.pi, 0, 0])
    assert np.allclose(np.abs(q), [1, 0, 0, 0])
    rng = np.random.default_rng(9)
    for _ in range(50):
        phi = rng.normal(size=3)
        np.testing.assert_allclose(se3.quat_to_rot(se3.exp_quat(phi)), se3.exp_so3(phi), atol=1e-12)


@given(vec3)
def test_log_quat_inverts_exp_quat(phi):
    if np.linalg.norm(phi) >= np.pi - 1e-6:
        return
    np.testing.assert_allclose(se3.log_quat(se3.exp_quat(phi)), phi, atol=1e-10)


def test_N_and_M():
    assert np.allclose(se3.se3_N([0, 0, 0]), np.eye(3))
    phi = np.array([0, 0, np.pi])
    integral, _ = quad_vec(lambda s: se3.exp_so3(s * phi), 0.0, 1.0, epsabs=1e-13)
    np.testing.assert_allclose(se3.se3_N(phi), integral, atol=1e-9)
    rho = np.array([0.3, -0.7, 1.1])
    phi = np.array([1e-6, 0, 0])
    M = se3.se3_M(np.concatenate([rho, phi]))
    P, F = se3.hat3(rho), se3.hat3(phi)
    # leading term plus its first-order correction; the correction alone is ~1e-7 here
    np.testing.assert_allclose(M, 0.5 * P + (F @ P + P @ F) / 6.0, atol=1e-12)
    dev = [np.abs(se3.se3_M(np.concatenate([rho, s * phi])) - 0.5 * P).max() for s in (1.0, 1e-3)]
    assert dev[1] < 2e-3 * dev[0]
    rng = np.random.default_rng(10)
    phi = rng.normal(size=3)
    np.testing.assert_allclose(se3.se3_N_inv(phi) @ se3.se3_N(phi), np.eye(3), atol=1e-12)


@pytest.mark.parametrize("theta", [0.0, 1e-8, 5e-5, 1e-4, 2e-4, 0.05, 0.1, 0.3, 1.0, 2.5])
def test_se3_jacobian_against_series(theta):
    # Left Jacobian of SE(3) is sum ad^k/(k+1)!; its top-right block is M.
    rng = np.random.default_rng(11)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    xi = np.concatenate([rng.normal(size=3), theta * axis])
    ad = se3.ad_se3(xi)
    J = np.zeros((6, 6))
    term = np.eye(6)
    for k in range(40):
        J += term
        term = term @ ad / (k + 2)
    np.testing.assert_allclose(se3.left_jacobian_se3(xi), J, atol=1e-12)


def test_small_angle_continuity():
    a = se3.exp_so3([1e-12, 0, 0])
    # the exact first-order change has size 1e-12; nothing else may leak in
    assert np.abs(a - np.eye(3)).max() <= 1e-12
    assert np.abs(a - (np.eye(3) + se3.hat3([1e-12, 0, 0]))).max() < 1e-20
    for f in (se3.se3_N, se3.exp_so3, se3.se3_N_inv):
        below = f([0.999999e-4, 0, 0])
        above = f([1.000001e-4, 0, 0])
        assert np.abs(below - above).max() < 1e-9


def test_quat_and_matrix_oplus_commute():
    rng = np.random.default_rng(12)
    for _ in range(200):
        T = se3.random_pose(rng, t_scale=5)
        xi = rng.normal(size=6)
        Q = QuatPose.from_pose(T)
        np.testing.assert_allclose(Q.oplus(xi).matrix(), T.oplus(xi).matrix(), atol=1e-9)
        T1 = se3.random_pose(rng, max_angle=3.0, t_scale=5)
        np.testing.assert_allclose(QuatPose.from_pose(T1).ominus(Q), T1.ominus(T), atol=1e-8)


def test_reorthonormalize():
    rng = np.random.default_rng(13)
    R = se3.random_rotation(rng)
    R_noisy = R + 1e-5 * rng.normal(size=(3, 3))
    Q = se3.reorthonormalize(R_noisy)
    assert np.allclose(Q.T @ Q, np.eye(3), atol=1e-12)
    assert np.linalg.norm(Q - R) < 1e-4
    assert se3.reorthonormalize(R) is R or np.array_equal(se3.reorthonormalize(R), R)


@settings(max_examples=200)
@given(st.lists(st.floats(-5, 5), min_size=6, max_size=6))
def test_oplus_is_left_exponential(v):
    xi = np.array(v)
    theta = np.linalg.norm(xi[3:])
    if theta > np.pi - 0.05:
        return
    g = Pose(se3.exp_so3([0.2, -0.4, 1.0]), [1.0, 2.0, 3.0])
    out = se3.oplus(g, xi)
    np.testing.assert_allclose(out.matrix(), expm(se3.hat6(xi)) @ g.matrix(), atol=1e-9)
