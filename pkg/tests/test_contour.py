import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial import ConvexHull

from relnav import contour as ct
from relnav.errors import DegenerateContour, RankDeficient


def square(side=4.0):
    return np.array([[0, 0], [side, 0], [side, side], [0, side]], float)


def blob(n=128, seed=0):
    """Star-shaped asymmetric closed curve, counter-clockwise."""
    rng = np.random.default_rng(seed)
    a = np.linspace(0, 2 * np.pi, n, endpoint=False)
    r = 10 + sum(rng.normal(scale=1.5) * np.cos(k * a + rng.uniform(0, 6)) for k in range(1, 5))
    return np.column_stack([r * np.cos(a), r * np.sin(a)])


def similar(D, beta, theta, t):
    return ct.SimilarityTransform(tuple(t), beta, theta).apply(D)


def test_resample_square():
    out = ct.resample_contour(square(), 8).points
    ref = [[0, 0], [2, 0], [4, 0], [4, 2], [4, 4], [2, 4], [0, 4], [0, 2]]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_resample_uniform_is_identity():
    a = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    circle = np.column_stack([np.cos(a), np.sin(a)]) * 5
    # a regular polygon is already uniform along its own perimeter
    np.testing.assert_allclose(ct.resample_contour(circle, 64).points, circle, atol=1e-9)


def random_convex(rng):
    P = rng.uniform(-10, 10, (30, 2))
    return P[ConvexHull(P).vertices]


def perimeter_errors(n, count=20, seed=1):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(count):
        hull = random_convex(rng)
        ref = ct.Contour(hull, 3).perimeter()
        errs.append(abs(ct.resample_contour(hull, n).perimeter() - ref) / ref)
    return np.array(errs)


@pytest.mark.xfail(strict=True, reason="equal arc-length samples cut polygon corners; the loss is O(1/n)")
def test_resample_preserves_perimeter_at_64():
    assert perimeter_errors(64).max() < 1e-3


def test_resample_perimeter_loss_is_first_order():
    e = [perimeter_errors(n).max() for n in (64, 256, 1024)]
    assert e[0] > e[1] > e[2]
    assert 2.5 < e[0] / e[1] < 6 and 2.5 < e[1] / e[2] < 6
    assert e[2] < 1e-3


def test_resample_errors():
    with pytest.raises(DegenerateContour):
        ct.resample_contour(np.ones((5, 2)), 16)
    with pytest.raises(DegenerateContour):
        ct.Contour(np.zeros((20, 2)))


def test_contour_removes_consecutive_duplicates():
    P = np.repeat(blob(16), 2, axis=0)
    assert len(ct.Contour(P)) == 16


def test_align_identity_and_planted():
    D = blob()
    tf, res = ct.align_fixed_shift(D, D)
    assert np.allclose(tf.t, 0, atol=1e-9) and tf.beta == pytest.approx(1) and abs(tf.theta) < 1e-12
    assert res < 1e-9
    tf, res = ct.align_fixed_shift(similar(D, 2.0, np.pi / 2, (5, -3)), D)
    assert tf.beta == pytest.approx(2, abs=1e-9) and tf.theta == pytest.approx(np.pi / 2, abs=1e-9)
    np.testing.assert_allclose(tf.t, (5, -3), atol=1e-9)


@pytest.mark.parametrize("theta", [3 * np.pi / 4, -3 * np.pi / 4, np.pi / 4, -np.pi / 4,
                                   np.pi / 2, -np.pi / 2, 0.0, np.pi - 0.01])
def test_angle_all_quadrants(theta):
    D = blob()
    tf, _ = ct.align_fixed_shift(similar(D, 0.7, theta, (1, 2)), D)
    err = (tf.theta - theta + np.pi) % (2 * np.pi) - np.pi
    assert abs(err) < 1e-9


def test_noise_error_shrinks_with_points():
    rng = np.random.default_rng(2)
    spread = []
    for n in (32, 512):
        errs = []
        for _ in range(200):
            D = blob(n, seed=3)
            Q = similar(D, 1.5, 0.4, (2, 1)) + rng.normal(scale=0.5, size=D.shape)
            tf, _ = ct.align_fixed_shift(Q, D)
            errs.append(tf.beta - 1.5)
        spread.append(np.std(errs))
    ratio = spread[0] / spread[1]
    assert 0.7 * 4 < ratio < 1.3 * 4  # sqrt(512 / 32) = 4


def test_degenerate_design():
    D = np.tile([[1.0, 2.0]], (10, 1))
    with pytest.raises(RankDeficient):
        ct.align_fixed_shift(D, D)


def test_align_recovers_shift():
    D = blob()
    tf, k, res = ct.align_contours(D, ct.cyclic_shift(D, 17))
    assert k == 17 and res < 1e-9
    assert tf.beta == pytest.approx(1) and abs(tf.theta) < 1e-9
    Q = similar(D, 0.8, -2.0, (40, -7))
    tf, k, _ = ct.align_contours(Q, ct.cyclic_shift(D, 45))
    assert k == 45 and tf.beta == pytest.approx(0.8) and tf.theta == pytest.approx(-2.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 127))
def test_cyclic_consistency(k):
    D = blob(seed=4)
    assert ct.align_contours(D, ct.cyclic_shift(D, k))[1] == k


def test_shift_ties_prefer_smaller_index():
    a = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    circle = np.column_stack([np.cos(a), np.sin(a)])
    # a regular polygon aligns perfectly at every shift
    assert ct.align_contours(circle, circle)[1] == 0


def test_reversed_orientation_is_not_searched():
    D = blob()
    res, _ = ct.shift_residuals(D, D[::-1])
    scale = np.linalg.norm(D - D.mean(axis=0))
    assert res.min() > 0.1 * scale
    # after orientation normalization the match is exact again
    R = ct.orient_ccw(D[::-1])
    assert ct.signed_area(R) > 0
    assert ct.align_contours(ct.orient_ccw(D), R)[2] < 1e-9


def test_linear_solution_beats_random_candidates():
    rng = np.random.default_rng(5)
    D = blob()
    Q = similar(D, 1.2, 0.3, (3, 4)) + rng.normal(scale=0.7, size=D.shape)
    tf, res = ct.align_fixed_shift(Q, D)
    for _ in range(1000):
        cand = ct.SimilarityTransform(tuple(rng.normal([3, 4], 1.0)), rng.uniform(0.8, 1.6), rng.uniform(-0.5, 1.0))
        assert np.linalg.norm(cand.apply(D) - Q) >= res


def test_batched_shifts_match_direct():
    rng = np.random.default_rng(6)
    D = blob(32, seed=7)
    Q = blob(32, seed=8) + rng.normal(size=(32, 2))
    res, _ = ct.shift_residuals(Q, D)
    for k in range(32):
        direct = ct.align_fixed_shift(Q, np.roll(D, -k, axis=0))[1]
        assert res[k] == pytest.approx(direct, rel=1e-9, abs=1e-9)


def test_mask_contour():
    m = np.zeros((60, 80), bool)
    m[10:50, 20:60] = True
    c = ct.mask_contour(m, 64)
    assert len(c) == 64
    assert abs(abs(c.signed_area()) - 40 * 40) < 0.05 * 1600
    x, y = c.points.T
    assert 19 <= x.min() and x.max() <= 60 and 9 <= y.min() and y.max() <= 50
