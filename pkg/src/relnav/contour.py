"""Closed-contour alignment under a 2D similarity transform.

A query contour ``Dq`` is matched to a train contour ``Dt`` by solving

    Dq_i = beta R(theta) Dt_{i+k} + t

for every cyclic shift ``k``.  Substituting ``b1 = beta cos(theta)`` and
``b2 = beta sin(theta)`` makes the problem linear in ``(t1, t2, b1, b2)``.
Shifting ``Dt`` only permutes the rows of the design matrix, so the design
matrix is built once from ``Dt`` and the query is rolled instead; one QR
factorization then serves all ``n`` shifts.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateContour, RankDeficient

MIN_POINTS = 8
DEFAULT_POINTS = 128
TIE_RTOL = 1e-9


class Contour:
    """Closed polyline of 2D points (pixels); the last point connects to the first."""

    __slots__ = ("points",)

    def __init__(self, points, min_points=MIN_POINTS):
        P = np.asarray(points, dtype=float).reshape(-1, 2)
        if len(P) > 1:
            keep = np.any(P != np.roll(P, 1, axis=0), axis=1)
            if not keep.any():
                keep[0] = True
            P = P[keep]
        if len(P) < min_points:
            raise DegenerateContour(f"contour needs at least {min_points} distinct points, got {len(P)}")
        self.points = P

    def __len__(self):
        return len(self.points)

    def __array__(self, dtype=None, copy=None):
        return self.points if dtype is None else self.points.astype(dtype)

    def signed_area(self):
        return signed_area(self.points)

    def perimeter(self):
        return float(np.linalg.norm(np.roll(self.points, -1, axis=0) - self.points, axis=1).sum())


@dataclass(frozen=True)
class SimilarityTransform:
    t: tuple
    beta: float
    theta: float

    @property
    def matrix(self):
        c, s = np.cos(self.theta), np.sin(self.theta)
        return self.beta * np.array([[c, -s], [s, c]])

    def apply(self, points):
        return np.asarray(points, dtype=float) @ self.matrix.T + np.asarray(self.t)


def signed_area(points):
    """Shoelace area; positive for counter-clockwise order in x-right, y-up axes."""
    P = np.asarray(points, dtype=float)
    x, y = P[:, 0], P[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def orient_ccw(points):
    """Reverse the ordering if needed so the signed area is non-negative.

    The first point is kept in place.
    """
    P = np.asarray(points, dtype=float)
    if signed_area(P) < 0:
        P = np.concatenate([P[:1], P[:0:-1]])
    return P


def cyclic_shift(points, k):
    """``out[i] = points[i - k]``, so that ``align_contours(D, cyclic_shift(D, k))`` finds ``k``."""
    return np.roll(np.asarray(points, dtype=float), k, axis=0)


def resample_contour(raw, n=DEFAULT_POINTS):
    """``n`` points equally spaced by arc length, starting at the first vertex."""
    P = np.asarray(raw, dtype=float).reshape(-1, 2)
    if len(P) < 3:
        raise DegenerateContour("need at least 3 points to resample")
    closed = np.vstack([P, P[:1]])
    seg = np.linalg.norm(np.diff(closed, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if not total > 0:
        raise DegenerateContour("contour has zero perimeter")
    targets = np.arange(n) * (total / n)
    x = np.interp(targets, s, closed[:, 0])
    y = np.interp(targets, s, closed[:, 1])
    return Contour(np.column_stack([x, y]), min_points=min(n, MIN_POINTS))


def mask_contour(mask, n=DEFAULT_POINTS):
    """Outer boundary of a binary silhouette, as an arc-length resampled (x, y) contour."""
    from skimage.measure import find_contours

    m = np.pad(np.asarray(mask, dtype=float), 1)
    found = find_contours(m, 0.5)
    if not found:
        raise DegenerateContour("mask has no boundary")
    rc = max(found, key=len)[:-1] - 1.0  # closed: last point repeats the first
    return resample_contour(rc[:, ::-1], n)


def _design(Dt):
    x, y = Dt[:, 0], Dt[:, 1]
    A = np.zeros((2 * len(Dt), 4))
    A[0::2, 0] = 1.0
    A[0::2, 2] = x
    A[0::2, 3] = -y
    A[1::2, 1] = 1.0
    A[1::2, 2] = y
    A[1::2, 3] = x
    return A


def _factor(Dt):
    A = _design(Dt)
    Q, R = np.linalg.qr(A)
    d = np.abs(np.diag(R))
    if d.min() <= 1e-12 * max(d.max(), 1.0):
        raise RankDeficient("contour points are coincident; similarity is undetermined")
    return A, Q, R


def _params_to_transform(p):
    t1, t2, b1, b2 = p
    return SimilarityTransform((float(t1), float(t2)), float(np.hypot(b1, b2)), float(np.arctan2(b2, b1)))


def _check_pair(Dq, Dt):
    Dq = np.asarray(Dq, dtype=float)
    Dt = np.asarray(Dt, dtype=float)
    if Dq.shape != Dt.shape:
        raise ValueError(f"contours differ in size: {Dq.shape} vs {Dt.shape}")
    return Dq, Dt


def align_fixed_shift(Dq, Dt):
    """Least-squares similarity mapping ``Dt[i]`` onto ``Dq[i]``.

    Returns ``(SimilarityTransform, residual_norm)``.
    """
    Dq, Dt = _check_pair(Dq, Dt)
    A, Q, R = _factor(Dt)
    b = Dq.reshape(-1)
    p = np.linalg.solve(R, Q.T @ b)
    return _params_to_transform(p), float(np.linalg.norm(A @ p - b))


def shift_residuals(Dq, Dt):
    """Residual norms and parameters for every cyclic shift, shape (n,) and (n, 4)."""
    Dq, Dt = _check_pair(Dq, Dt)
    A, Q, R = _factor(Dt)
    n = len(Dq)
    # column k holds the query rolled by k: Dq[i - k] pairs with Dt[i]
    idx = (np.arange(n)[:, None] - np.arange(n)[None, :]) % n
    B = Dq[idx].transpose(0, 2, 1).reshape(2 * n, n)
    params = np.linalg.solve(R, Q.T @ B)
    res = np.linalg.norm(A @ params - B, axis=0)
    return res, params.T


def align_contours(Dq, Dt):
    """Search all cyclic shifts; returns ``(transform, shift, residual_norm)``.

    Orientation is not searched: a reversed contour matches poorly at every
    shift.  Apply :func:`orient_ccw` to both inputs beforehand when the
    ordering direction is unknown.  Ties (equal up to rounding, relative to
    the query's size) go to the smaller shift.
    """
    res, params = shift_residuals(Dq, Dt)
    Dq = np.asarray(Dq, dtype=float)
    tol = TIE_RTOL * max(float(np.linalg.norm(Dq - Dq.mean(axis=0))), 1.0)
    k = int(np.flatnonzero(res <= res.min() + tol)[0])
    return _params_to_transform(params[k]), k, float(res[k])


def align_candidates(Dq, Dt, n=3):
    """The ``n`` lowest cyclic local minima of the shift residual, best first.

    Near-symmetric outlines have several comparable alignments; callers that
    can score a hypothesis independently should look past the global best.
    """
    res, params = shift_residuals(Dq, Dt)
    left, right = np.roll(res, 1), np.roll(res, -1)
    minima = np.flatnonzero((res <= left) & (res <= right))
    minima = minima[np.argsort(res[minima], kind="stable")][:n]
    return [(_params_to_transform(params[k]), int(k), float(res[k])) for k in minima]
