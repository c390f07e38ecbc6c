"""Complex Zernike moments of binary silhouettes.

Masks are boolean arrays indexed ``mask[row, col]``.  Pixel coordinates
follow the image-point convention used by the camera module: ``z1`` is the
column and ``z2`` the row.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from math import factorial

import numpy as np

from .errors import DegeneratePhase, EmptyMask, InvalidIndex

PHASE_FLOOR = 1e-6
DISK_MARGIN = 1.2
NORMALIZER_ORDER = ((3, 1), (5, 1), (1, 1))


def geometric_moments(mask, order=2):
    """Raw moments ``M[p, q] = sum z1^p z2^q`` over set pixels, p + q <= order."""
    rows, cols = np.nonzero(np.asarray(mask, dtype=bool))
    if rows.size == 0:
        raise EmptyMask("mask has no set pixels")
    z1 = cols.astype(float)
    z2 = rows.astype(float)
    M = np.zeros((order + 1, order + 1))
    for p in range(order + 1):
        zp = z1**p
        for q in range(order + 1 - p):
            M[p, q] = np.sum(zp * z2**q)
    return M


def centroid(mask):
    M = geometric_moments(mask, 1)
    return M[1, 0] / M[0, 0], M[0, 1] / M[0, 0]


def _check_index(n, l):
    l = abs(l)
    if n < 0 or l > n or (n - l) % 2:
        raise InvalidIndex(f"invalid Zernike index (n={n}, l={l})")
    return l


def radial_poly_direct(n, l, r):
    """Radial polynomial from its explicit factorial sum.

    The alternating sum cancels badly in floating point for n near 20, so
    it is evaluated exactly in rational arithmetic on the (exactly
    representable) float inputs and rounded once.  Slow; meant as a
    reference.
    """
    l = _check_index(n, l)
    coeffs = [(n - 2 * s, Fraction((-1) ** s * factorial(n - s),
                                   factorial(s) * factorial((n + l) // 2 - s) * factorial((n - l) // 2 - s)))
              for s in range((n - l) // 2 + 1)]

    def one(x):
        xf = Fraction(float(x))
        return float(sum(c * xf**k for k, c in coeffs))

    r = np.asarray(r, dtype=float)
    return np.vectorize(one, otypes=[float])(r) if r.ndim else np.float64(one(r))


def _kintner_column(l, n_max, r):
    """R_{n,l}(r) for n = l, l+2, ..., n_max via the three-term recurrence."""
    out = {}
    rl = r**l
    out[l] = rl
    if l + 2 <= n_max:
        out[l + 2] = (l + 2) * r**(l + 2) - (l + 1) * rl
    r2 = r * r
    for n in range(l + 4, n_max + 1, 2):
        k1 = (n + l) * (n - l) * (n - 2) / 2.0
        k2 = 2.0 * n * (n - 1) * (n - 2)
        k3 = -(l * l) * (n - 1) - n * (n - 1) * (n - 2)
        k4 = -n * (n + l - 2) * (n - l - 2) / 2.0
        out[n] = ((k2 * r2 + k3) * out[n - 2] + k4 * out[n - 4]) / k1
    return out


def radial_poly(n, l, r, method="kintner"):
    """Zernike radial polynomial R_nl(r).

    ``method`` selects the three-term recurrence (default) or the direct
    factorial sum.
    """
    l = _check_index(n, l)
    if method == "direct":
        return radial_poly_direct(n, l, r)
    r = np.asarray(r, dtype=float)
    return _kintner_column(l, n, r)[n]


def zernike_indices(n_max):
    """(n, l) pairs with l >= 0, ordered by n then l."""
    return [(n, l) for n in range(n_max + 1) for l in range(n % 2, n + 1, 2)]


@dataclass
class ZernikeDescriptor:
    n_max: int
    values: np.ndarray  # complex, aligned with zernike_indices(n_max)
    normalizer: tuple | None = None
    _index: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        idx = zernike_indices(self.n_max)
        if self.values.shape != (len(idx),):
            raise ValueError("values do not match n_max")
        self._index = {nl: i for i, nl in enumerate(idx)}

    def __getitem__(self, nl):
        n, l = nl
        _check_index(n, l)
        v = self.values[self._index[(n, abs(l))]]
        return np.conj(v) if l < 0 else v

    def magnitudes(self):
        return np.abs(self.values)


def zernike_descriptor(mask, n_max=10, beta=DISK_MARGIN):
    """Centroid-centred, disk-scaled complex moments up to order ``n_max``.

    Parameters
    ----------
    mask : (H, W) array_like of bool
        Silhouette.
    n_max : int
        Highest moment order, at least 4.
    beta : float
        Disk radius in units of the equal-area radius ``sqrt(M00/pi)``.
        Pixels falling outside the unit disk are dropped.
    """
    if n_max < 4:
        raise ValueError("n_max must be at least 4")
    mask = np.asarray(mask, dtype=bool)
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise EmptyMask("mask has no set pixels")
    m00 = float(rows.size)
    cx, cy = cols.mean(), rows.mean()
    rd = beta * np.sqrt(m00 / np.pi)
    x = (cols - cx) / rd
    y = (rows - cy) / rd
    r = np.hypot(x, y)
    keep = r <= 1.0
    x, y, r = x[keep], y[keep], r[keep]
    theta = np.arctan2(y, x)
    area = 1.0 / (rd * rd)
    idx = zernike_indices(n_max)
    vals = np.zeros(len(idx), dtype=complex)
    columns = {l: _kintner_column(l, n_max, r) for l in range(n_max + 1)}
    harm = {l: np.exp(1j * l * theta) for l in range(n_max + 1)}
    for i, (n, l) in enumerate(idx):
        vals[i] = (n + 1) / np.pi * area * np.sum(columns[l][n] * harm[l])
    return ZernikeDescriptor(n_max, vals)


def rotation_normalize(desc: ZernikeDescriptor, order=NORMALIZER_ORDER, floor=PHASE_FLOOR):
    """Remove the in-plane rotation phase using the first usable ``l = 1`` moment.

    Every ``A_nl`` is multiplied by ``exp(-i l arg A_ref)``; afterwards the
    reference moment is real and positive.
    """
    ref = None
    for nl in order:
        if nl[0] <= desc.n_max and abs(desc[nl]) > floor:
            ref = nl
            break
    if ref is None:
        raise DegeneratePhase("no l = 1 moment above the phase floor")
    ang = np.angle(desc[ref]) / ref[1]
    ls = np.array([l for _, l in zernike_indices(desc.n_max)])
    vals = desc.values * np.exp(-1j * ls * ang)
    i = desc._index[ref]
    vals[i] = abs(vals[i])
    return ZernikeDescriptor(desc.n_max, vals, normalizer=ref)


def feature_layout(n_max, normalizer=(3, 1)):
    """Slots of the flattened feature vector as ``(n, l, part)`` tuples.

    The l > 0 moments come first as interleaved (re, im) pairs, skipping the
    imaginary part of the phase reference, which is zero by construction.
    The real l = 0 moments of even order n >= 2 follow.
    """
    slots = []
    for n, l in zernike_indices(n_max):
        if l == 0:
            continue
        slots.append((n, l, "re"))
        if (n, l) != tuple(normalizer):
            slots.append((n, l, "im"))
    slots += [(n, 0, "re") for n in range(2, n_max + 1, 2)]
    return slots


def descriptor_to_feature(desc: ZernikeDescriptor, d=60):
    """Flatten a normalized descriptor into a real vector of length ``d``."""
    norm = desc.normalizer or (3, 1)
    out = np.zeros(d)
    for k, (n, l, part) in enumerate(feature_layout(desc.n_max, norm)[:d]):
        v = desc[(n, l)]
        out[k] = v.real if part == "re" else v.imag
    return out


def feature_to_descriptor(feature, n_max, normalizer=(3, 1)):
    """Inverse of :func:`descriptor_to_feature` (slots beyond ``d`` become 0)."""
    feature = np.asarray(feature, dtype=float)
    zd = ZernikeDescriptor(n_max, np.zeros(len(zernike_indices(n_max)), complex), tuple(normalizer))
    layout = feature_layout(n_max, normalizer)
    if len(feature) > len(layout) and np.any(feature[len(layout):] != 0):
        raise ValueError("feature longer than the layout carries non-zero padding")
    for val, (n, l, part) in zip(feature, layout):
        i = zd._index[(n, l)]
        zd.values[i] += val if part == "re" else 1j * val
    for n, l in zernike_indices(n_max):
        if l == 0:
            # conjugate symmetry forces the l = 0 moments to be real
            assert zd[(n, 0)].imag == 0.0
    return zd


def mask_feature(mask, n_max=10, d=60, beta=DISK_MARGIN):
    """Convenience: descriptor, rotation normalization and flattening."""
    return descriptor_to_feature(rotation_normalize(zernike_descriptor(mask, n_max, beta)), d)


def write_pgm(path, mask):
    """Binary mask as 8-bit P5 PGM with values 0 / 255."""
    img = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(b"P5\n%d %d\n255\n" % (w, h))
        fh.write(img.tobytes())


def read_pgm(path, threshold=128):
    """Read a P5 PGM; returns a boolean mask (pixel >= threshold)."""
    with open(path, "rb") as fh:
        data = fh.read()
    # header: magic, width, height, maxval separated by whitespace/comments
    tokens = []
    pos = 0
    pat = re.compile(rb"\s*(#[^\n]*\n\s*)*(\S+)")
    for _ in range(4):
        m = pat.match(data, pos)
        if m is None:
            raise ValueError("truncated PGM header")
        tokens.append(m.group(2))
        pos = m.end()
    if tokens[0] != b"P5":
        raise ValueError("not a binary PGM (P5)")
    w, h, maxval = (int(t) for t in tokens[1:])
    pos += 1
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    img = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return img >= threshold * (maxval / 255.0)
