"""Synthetic scenes: meshes, silhouette/depth rendering, viewsphere keyframes,
trajectories and simulated feature correspondences.

Depth maps hold the camera-frame depth ``z`` of the nearest surface (0 for
background), so a pixel ``(u, v)`` with depth ``z`` back-projects to
``z * K^-1 [u, v, 1]``.  Pixel ``[row, col]`` has its centre at
``(u, v) = (col, row)``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from . import se3
from ._jsonio import dump as json_dump
from .camera import Intrinsics, project
from .errors import EmptySilhouette, ParseError

NEAR_PLANE = 1e-3
AREA_EPS = 1e-12
EDGE_EPS = 1e-9


# ---------------------------------------------------------------------------
# meshes

@dataclass
class TriMesh:
    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    def face_areas(self):
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def cleaned(self):
        return TriMesh(self.vertices, self.faces[self.face_areas() > AREA_EPS])

    def feature_edges(self, angle_deg=1.0, normals=False):
        """Mesh edges whose two faces meet at more than ``angle_deg``, plus open edges, as (E, 2, 3).

        With ``normals`` the unit normals and the centroids of the two
        adjacent faces are returned as well, each (E, 2, 3); an open edge
        repeats its single face.
        """
        a, b, c = (self.vertices[self.faces[:, k]] for k in range(3))
        n = np.cross(b - a, c - a)
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        adj = {}
        for fi, f in enumerate(self.faces):
            for i, j in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0])):
                adj.setdefault((min(i, j), max(i, j)), []).append(fi)
        cos_lim = np.cos(np.radians(angle_deg))
        keep = [(k, fs) for k, fs in adj.items()
                if len(fs) != 2 or n[fs[0]] @ n[fs[1]] < cos_lim]
        segs = self.vertices[np.array([k for k, _ in keep])] if keep else np.zeros((0, 2, 3))
        if not normals:
            return segs
        cen = (a + b + c) / 3.0
        nn = np.array([[n[fs[0]], n[fs[-1]]] for _, fs in keep]) if keep else np.zeros((0, 2, 3))
        cc = np.array([[cen[fs[0]], cen[fs[-1]]] for _, fs in keep]) if keep else np.zeros((0, 2, 3))
        return segs, nn, cc

    def bounds(self):
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def radius(self):
        return float(np.linalg.norm(self.vertices, axis=1).max())

    @staticmethod
    def merge(*meshes):
        verts, faces, off = [], [], 0
        for m in meshes:
            verts.append(m.vertices)
            faces.append(m.faces + off)
            off += len(m.vertices)
        return TriMesh(np.vstack(verts), np.vstack(faces))


def box_mesh(size, center=(0.0, 0.0, 0.0)):
    """Axis-aligned box with outward-wound triangles."""
    sx, sy, sz = np.asarray(size, dtype=float) / 2
    c = np.asarray(center, dtype=float)
    v = np.array([[x, y, z] for x in (-sx, sx) for y in (-sy, sy) for z in (-sz, sz)]) + c
    quads = [(0, 1, 3, 2), (4, 6, 7, 5), (0, 4, 5, 1), (2, 3, 7, 6), (0, 2, 6, 4), (1, 5, 7, 3)]
    f = [(a, b, c_) for a, b, c_, d in quads] + [(a, c_, d) for a, b, c_, d in quads]
    return TriMesh(v, f)


def make_target_mesh():
    """Asymmetric test target: box body, offset solar panel on a strut, antenna block."""
    body = box_mesh((4.0, 2.4, 2.0), (0.0, 0.0, 0.0))
    strut = box_mesh((0.3, 1.6, 0.3), (-0.8, 2.0, 0.2))
    panel = box_mesh((5.0, 0.12, 2.6), (-1.3, 3.4, 0.2))
    antenna = box_mesh((1.0, 0.8, 1.4), (1.3, -0.5, 1.7))
    mesh = TriMesh.merge(body, strut, panel, antenna)
    centre = 0.5 * (mesh.vertices.min(axis=0) + mesh.vertices.max(axis=0))
    return TriMesh(mesh.vertices - centre, mesh.faces)


def load_obj(path):
    """Read ``v``/``f`` records; polygons are fan-triangulated.

    Faces may use ``i``, ``i/t``, ``i//n`` or ``i/t/n`` and negative
    (relative) indices.  Texture/normal/grouping records are skipped; other
    geometry (curves, surfaces, points, lines) is rejected.
    """
    verts, faces = [], []
    skip = {"vt", "vn", "vp", "g", "o", "s", "usemtl", "mtllib"}
    reject = {"l", "p", "curv", "curv2", "surf", "cstype", "deg", "bmat", "step"}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            tag, args = parts[0], parts[1:]
            if tag == "v":
                if len(args) < 3:
                    raise ParseError("vertex needs three coordinates", lineno)
                try:
                    verts.append([float(a) for a in args[:3]])
                except ValueError as exc:
                    raise ParseError(f"bad vertex coordinate: {exc}", lineno) from None
            elif tag == "f":
                if len(args) < 3:
                    raise ParseError("face needs at least three vertices", lineno)
                idx = []
                for a in args:
                    try:
                        k = int(a.split("/")[0])
                    except ValueError:
                        raise ParseError(f"bad face index {a!r}", lineno) from None
                    k = k - 1 if k > 0 else len(verts) + k
                    if not 0 <= k < len(verts):
                        raise ParseError(f"face index {a} out of range", lineno)
                    idx.append(k)
                faces.extend((idx[0], idx[i], idx[i + 1]) for i in range(1, len(idx) - 1))
            elif tag in skip:
                continue
            elif tag in reject:
                raise ParseError(f"unsupported geometry record {tag!r}", lineno)
            else:
                raise ParseError(f"unknown record {tag!r}", lineno)
    if not faces:
        raise ParseError("no faces", None)
    return TriMesh(verts, faces).cleaned()


def save_obj(mesh: TriMesh, path):
    with open(path, "w", encoding="utf-8") as fh:
        for v in mesh.vertices:
            fh.write("v {} {} {}\n".format(*(format(x, ".17g") for x in v)))
        for f in mesh.faces:
            fh.write("f {} {} {}\n".format(*(f + 1)))


def bundled_target_path():
    return str(resources.files("relnav") / "data" / "target.obj")


def load_target():
    return load_obj(bundled_target_path())


# ---------------------------------------------------------------------------
# rendering

def rasterize(mesh: TriMesh, K: Intrinsics, T: se3.Pose):
    """Z-buffered silhouette and depth map of ``mesh`` seen under ``T``.

    Triangles with a vertex closer than the near plane are skipped.  Depth
    is interpolated perspective-correctly (``1/z`` is affine in the image).
    """
    W, H = K.width, K.height
    depth = np.full((H, W), np.inf)
    pc = mesh.vertices @ T.R.T + T.t
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.column_stack([K.fx * pc[:, 0] / z + K.d1, K.fy * pc[:, 1] / z + K.d2])
    for f in mesh.faces:
        if np.any(z[f] <= NEAR_PLANE):
            continue
        (x0, y0), (x1, y1), (x2, y2) = uv[f]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < AREA_EPS:
            continue
        cmin = max(int(np.ceil(min(x0, x1, x2))), 0)
        cmax = min(int(np.floor(max(x0, x1, x2))), W - 1)
        rmin = max(int(np.ceil(min(y0, y1, y2))), 0)
        rmax = min(int(np.floor(max(y0, y1, y2))), H - 1)
        if cmin > cmax or rmin > rmax:
            continue
        px = np.arange(cmin, cmax + 1, dtype=float)[None, :]
        py = np.arange(rmin, rmax + 1, dtype=float)[:, None]
        w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) / area
        w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) / area
        w2 = 1.0 - w0 - w1
        # a small negative tolerance keeps pixels on shared edges from cracking
        inside = (w0 >= -EDGE_EPS) & (w1 >= -EDGE_EPS) & (w2 >= -EDGE_EPS)
        if not inside.any():
            continue
        iz = w0 / z[f[0]] + w1 / z[f[1]] + w2 / z[f[2]]
        with np.errstate(divide="ignore"):
            zz = np.where(inside, 1.0 / iz, np.inf)
        block = depth[rmin:rmax + 1, cmin:cmax + 1]
        np.minimum(block, zz, out=block)
    mask = np.isfinite(depth)
    depth[~mask] = 0.0
    return mask, depth


def backproject_pixels(K: Intrinsics, T: se3.Pose, uv, z):
    """Target-frame points for image points ``uv`` at camera depths ``z``."""
    pc = K.backproject(uv) * np.asarray(z, dtype=float)[:, None]
    return (pc - T.t) @ T.R


# ---------------------------------------------------------------------------
# viewsphere

def look_at(position, distance_axis_up=(0.0, 0.0, 1.0)):
    """Rotation whose boresight (camera z) points from ``position`` to the origin.

    Image "up" (camera -y) is the given world axis projected out of the
    boresight; +x is used when the boresight is parallel to it.
    """
    c = np.asarray(position, dtype=float)
    zc = -c / np.linalg.norm(c)
    up = np.asarray(distance_axis_up, dtype=float)
    u = up - (up @ zc) * zc
    if np.linalg.norm(u) < 1e-9:
        u = np.array([1.0, 0.0, 0.0]) - zc[0] * zc
    u /= np.linalg.norm(u)
    yc = -u
    xc = np.cross(yc, zc)
    return np.vstack([xc, yc, zc])


def view_pose(az_deg, el_deg, distance):
    """Target-to-camera pose for a camera on the viewsphere looking at the origin."""
    az, el = np.radians(az_deg), np.radians(el_deg)
    c = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    R = look_at(c)
    return se3.Pose(R, -R @ c)


def view_direction(T: se3.Pose):
    """(azimuth, elevation) in degrees of the camera centre seen from the target."""
    c = -T.R.T @ T.t
    az = np.degrees(np.arctan2(c[1], c[0])) % 360.0
    el = np.degrees(np.arcsin(np.clip(c[2] / np.linalg.norm(c), -1, 1)))
    return float(az), float(el)


@dataclass(frozen=True)
class ViewSample:
    az: float
    el: float
    pose: se3.Pose


def sample_viewsphere(az_step, el_step, distance, mode="bands"):
    """Camera poses on a sphere around the target.

    ``bands``: elevation band centres ``-90 + (k + 1/2) el_step``, so the
    poles never appear and 9/9 degree steps give 40 x 20 = 800 views.
    ``grid``: elevations ``-90 + k el_step`` without the poles, plus one view
    at each pole.
    """
    if (360.0 / az_step) % 1 or (180.0 / el_step) % 1:
        raise ValueError("steps must divide 360 and 180 degrees")
    n_az, n_el = int(round(360.0 / az_step)), int(round(180.0 / el_step))
    azs = [i * az_step for i in range(n_az)]
    if mode == "bands":
        els = [-90.0 + (j + 0.5) * el_step for j in range(n_el)]
        poles = []
    elif mode == "grid":
        els = [-90.0 + j * el_step for j in range(1, n_el)]
        poles = [-90.0, 90.0]
    else:
        raise ValueError(f"unknown viewsphere mode {mode!r}")
    out = [ViewSample(a, e, view_pose(a, e, distance)) for e in els for a in azs]
    out += [ViewSample(0.0, e, view_pose(0.0, e, distance)) for e in poles]
    return out


# ---------------------------------------------------------------------------
# keyframes

DESCRIPTOR_DIM = 16
# a confused detection's descriptor leans this far towards the feature it is mistaken for
CONFUSION_BLEND = 0.6


@dataclass
class Keyframe:
    kf_id: int
    pose: se3.Pose
    az: float
    el: float
    mask: np.ndarray
    depth: np.ndarray
    points3d: np.ndarray     # (n, 3) target frame
    points2d: np.ndarray     # (n, 2) projections under pose
    point_ids: np.ndarray    # (n,)
    descriptors: np.ndarray  # (n, DESCRIPTOR_DIM), unit rows
    edges3d: np.ndarray      # (m, 3)
    edges2d: np.ndarray      # (m, 2)
    edge_keyline: np.ndarray  # (m,) keyline index
    keylines: np.ndarray     # (k, 2, 2) segment end points in the image
    keylines3d: np.ndarray   # (k, 2, 3) the same end points lifted to the target frame
    contour: np.ndarray = field(default=None, repr=False)  # (c, 2) outer boundary, image coordinates
    edge_dirs3d: np.ndarray = field(default=None, repr=False)  # (m, 3) unit direction of the mesh edge
    edge_normals: np.ndarray = field(default=None, repr=False)  # (m, 2, 3) adjacent face normals, NaN if unknown
    edge_inside3d: np.ndarray = field(default=None, repr=False)  # (m, 3) in-face direction towards the object, NaN if unknown

    @property
    def area(self):
        return int(self.mask.sum())


def boundary_polyline(mask):
    """Sub-pixel outer boundary (x, y) of a binary mask, last point not repeated."""
    from skimage.measure import find_contours

    m = np.pad(np.asarray(mask, dtype=float), 1)
    found = find_contours(m, 0.5)
    if not found:
        raise EmptySilhouette("mask is empty")
    rc = max(found, key=len)[:-1] - 1.0
    return rc[:, ::-1].copy()


def _merge_keylines(poly, angle_tol_deg=2.0, min_len=3.0):
    """Straight segments of a closed polygon, merging near-collinear neighbours."""
    pts = list(poly)
    segs = [(pts[i], pts[(i + 1) % len(pts)]) for i in range(len(pts))]
    merged = []
    for a, b in segs:
        if merged:
            pa, pb = merged[-1]
            d0, d1 = pb - pa, b - a
            ang = abs(np.degrees(np.arctan2(d0[0] * d1[1] - d0[1] * d1[0], d0 @ d1)))
            if ang < angle_tol_deg and np.linalg.norm(a - pb) < 2.0:
                merged[-1] = (pa, b)
                continue
        merged.append((a, b))
    return [s for s in merged if np.linalg.norm(s[1] - s[0]) >= min_len]


def _interior_depth(mask, depth, uv):
    """Depth at the nearest in-mask pixel to each image point (searching a 3x3 ring)."""
    H, W = mask.shape
    out = np.zeros(len(uv))
    for i, (u, v) in enumerate(uv):
        c0, r0 = int(round(u)), int(round(v))
        best, bd = 0.0, np.inf
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = r0 + dr, c0 + dc
                if 0 <= r < H and 0 <= c < W and mask[r, c]:
                    d = (c - u) ** 2 + (r - v) ** 2
                    if d < bd:
                        best, bd = depth[r, c], d
        out[i] = best
    return out


def _snap_to_edges(K, pose, segs, uv, max_px=1.0):
    """Lift boundary points onto the nearest projected feature edge.

    For each image point the feature edges passing within ``max_px`` are
    candidates; the closest to the camera wins since only it can bound the
    silhouette there.  The 3D parameter along the edge follows from the
    image parameter by undoing the perspective division.
    """
    m = len(uv)
    P3, D3, ok = np.zeros((m, 3)), np.zeros((m, 3)), np.zeros(m, bool)
    idx = np.zeros(m, dtype=int)
    if not len(segs) or not m:
        return P3, D3, ok, idx
    A, B = segs[:, 0], segs[:, 1]
    zA, zB = (pose.apply(A))[:, 2], (pose.apply(B))[:, 2]
    front = np.flatnonzero((zA > NEAR_PLANE) & (zB > NEAR_PLANE))
    A, B, zA, zB = A[front], B[front], zA[front], zB[front]
    if not len(A):
        return P3, D3, ok, idx
    a, b = project(K, pose, A), project(K, pose, B)
    d = b - a
    dd = np.maximum((d * d).sum(axis=1), 1e-18)
    sp = np.clip(((uv[:, None, :] - a[None]) * d[None]).sum(axis=2) / dd[None], 0.0, 1.0)
    dist = np.linalg.norm(a[None] + sp[..., None] * d[None] - uv[:, None, :], axis=2)
    lam = sp * zA[None] / ((1 - sp) * zB[None] + sp * zA[None])
    zP = (1 - lam) * zA[None] + lam * zB[None]
    zP = np.where(dist <= max_px, zP, np.inf)
    best = np.argmin(zP, axis=1)
    ok = np.isfinite(zP[np.arange(m), best])
    lb = lam[np.arange(m), best][:, None]
    P3 = A[best] + lb * (B[best] - A[best])
    D3 = B[best] - A[best]
    D3 /= np.linalg.norm(D3, axis=1, keepdims=True)
    return P3, D3, ok, front[best]


def _inside_directions(points, dirs, normals, centroids):
    """Sum of the two in-face unit vectors leaving each edge point into its faces.

    Wherever the edge lies on the outline both faces project to the object
    side, so the projection of this vector tells which side of the outline
    the object is on.  NaN where the faces are unknown.
    """
    out = np.full((len(points), 3), np.nan)
    for i in range(len(points)):
        if np.isnan(normals[i]).any():
            continue
        v = np.zeros(3)
        for n, c in zip(normals[i], centroids[i]):
            w = np.cross(n, dirs[i])
            if w @ (c - points[i]) < 0:
                w = -w
            v += w / max(np.linalg.norm(w), 1e-12)
        if np.linalg.norm(v) > 1e-6:
            out[i] = v / np.linalg.norm(v)
    return out


def build_keyframe(mesh, K: Intrinsics, pose: se3.Pose, density=150, seed=0, kf_id=0,
                   edge_spacing=6.0, az=np.nan, el=np.nan, margin=2, keyline_tolerance=1.0):
    """Render a view and build its point and edge catalogs.

    ``density`` is the number of surface points sampled (pixels at least
    ``margin`` px inside the silhouette).  Edge control points are spaced
    along straight keylines fitted to the silhouette boundary and lifted to
    3D by snapping onto the nearest projected feature edge of the mesh; if no
    feature edge passes within a pixel the depth of the adjacent interior
    pixel along the ray through the sub-pixel boundary point is used.
    """
    from scipy.ndimage import binary_erosion
    from skimage.measure import approximate_polygon

    rng = np.random.default_rng(seed)
    mask, depth = rasterize(mesh, K, pose)
    if not mask.any():
        raise EmptySilhouette("target is not visible from this pose")
    inner = binary_erosion(mask, iterations=margin) if margin else mask
    rows, cols = np.nonzero(inner)
    n = min(int(density), len(rows))
    pick = np.sort(rng.choice(len(rows), n, replace=False)) if n else np.zeros(0, int)
    uv = np.column_stack([cols[pick], rows[pick]]).astype(float)
    p3 = backproject_pixels(K, pose, uv, depth[rows[pick], cols[pick]]) if n else np.zeros((0, 3))
    p2 = project(K, pose, p3) if n else np.zeros((0, 2))
    desc = rng.normal(size=(n, DESCRIPTOR_DIM))
    desc /= np.linalg.norm(desc, axis=1, keepdims=True) if n else 1.0

    contour = boundary_polyline(mask)
    poly = approximate_polygon(np.vstack([contour, contour[:1]]), keyline_tolerance)[:-1]
    keylines = _merge_keylines(poly) if len(poly) >= 3 else []
    e2, kl = [], []
    for j, (a, b) in enumerate(keylines):
        L = np.linalg.norm(b - a)
        m = int(L // edge_spacing)
        if m < 1:
            continue
        s = (np.arange(m) + 0.5) / m
        e2.append(a + s[:, None] * (b - a))
        kl.append(np.full(m, j))
    if e2:
        e2 = np.vstack(e2)
        kl = np.concatenate(kl)
        z = _interior_depth(mask, depth, e2)
        fe, fn, fc = mesh.feature_edges(normals=True)
        e3, dirs, snapped, which = _snap_to_edges(K, pose, fe, e2)
        nrm = np.full((len(e2), 2, 3), np.nan)
        nrm[snapped] = fn[which[snapped]]
        cen = np.full((len(e2), 2, 3), np.nan)
        cen[snapped] = fc[which[snapped]]
        lifted = ~snapped & (z > 0)
        if lifted.any():
            e3[lifted] = backproject_pixels(K, pose, e2[lifted], z[lifted])
            seg = np.vstack([np.array([a, b]) for a, b in keylines])
            ends = backproject_pixels(K, pose, seg, _interior_depth(mask, depth, seg)).reshape(-1, 2, 3)
            dk = ends[:, 1] - ends[:, 0]
            dirs[lifted] = dk[kl[lifted]] / np.maximum(np.linalg.norm(dk[kl[lifted]], axis=1, keepdims=True), 1e-12)
        ok = snapped | lifted
        e3, dirs, kl, nrm, cen = e3[ok], dirs[ok], kl[ok], nrm[ok], cen[ok]
        e2 = project(K, pose, e3) if len(e3) else np.zeros((0, 2))
        inside = _inside_directions(e3, dirs, nrm, cen)
    else:
        inside = np.zeros((0, 3))
        e2, kl, e3, dirs = np.zeros((0, 2)), np.zeros(0, int), np.zeros((0, 3)), np.zeros((0, 3))
        nrm = np.zeros((0, 2, 3))
    segs = np.array([[a, b] for a, b in keylines]) if keylines else np.zeros((0, 2, 2))
    ends = segs.reshape(-1, 2)
    segs3 = (backproject_pixels(K, pose, ends, _interior_depth(mask, depth, ends)).reshape(-1, 2, 3)
             if len(ends) else np.zeros((0, 2, 3)))
    return Keyframe(kf_id, pose, float(az), float(el), mask, depth, p3, p2,
                    np.arange(n) + kf_id * 100000, desc, e3, np.asarray(e2), np.asarray(kl, dtype=int),
                    segs, segs3, contour, dirs, nrm, inside)


def build_keyframe_database(mesh, K, az_step=9.0, el_step=9.0, distance=50.0, density=150, seed=0,
                            mode="bands"):
    views = sample_viewsphere(az_step, el_step, distance, mode)
    seeds = np.random.SeedSequence(seed).spawn(len(views))
    return [build_keyframe(mesh, K, v.pose, density, np.random.default_rng(s), i, az=v.az, el=v.el)
            for i, (v, s) in enumerate(zip(views, seeds))]


def write_depth(path, depth):
    """Little-endian float32 raster with a ``<u4 width, <u4 height`` header."""
    depth = np.asarray(depth, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", depth.shape[1], depth.shape[0]))
        fh.write(depth.tobytes(order="C"))


def read_depth(path):
    with open(path, "rb") as fh:
        w, h = struct.unpack("<II", fh.read(8))
        return np.frombuffer(fh.read(), dtype="<f4").reshape(h, w).astype(float)


def _edge_record(kf, i):
    rec = {"p": kf.edges3d[i], "z": kf.edges2d[i], "keyline": int(kf.edge_keyline[i])}
    if kf.edge_dirs3d is not None:
        rec["dir"] = kf.edge_dirs3d[i]
    if kf.edge_normals is not None and not np.isnan(kf.edge_normals[i]).any():
        rec["normals"] = kf.edge_normals[i]
    if kf.edge_inside3d is not None and not np.isnan(kf.edge_inside3d[i]).any():
        rec["inside"] = kf.edge_inside3d[i]
    return rec


def save_keyframes(keyframes, directory, K: Intrinsics):
    from .zernike import write_pgm

    os.makedirs(directory, exist_ok=True)
    index = {"version": 1, "camera": K.to_dict(), "keyframes": []}
    for kf in keyframes:
        stem = f"kf_{kf.kf_id:04d}"
        write_pgm(os.path.join(directory, stem + ".pgm"), kf.mask)
        write_depth(os.path.join(directory, stem + ".depth"), kf.depth)
        json_dump({
            "id": kf.kf_id,
            "az_deg": None if np.isnan(kf.az) else kf.az, "el_deg": None if np.isnan(kf.el) else kf.el,
            "pose": {"R": kf.pose.R, "t": kf.pose.t},
            "points": [{"id": int(i), "p": p, "z": z, "desc": d}
                       for i, p, z, d in zip(kf.point_ids, kf.points3d, kf.points2d, kf.descriptors)],
            "edges": [_edge_record(kf, i) for i in range(len(kf.edges3d))],
            "keylines": kf.keylines,
            "keylines3d": kf.keylines3d,
            "contour": kf.contour,
        }, os.path.join(directory, stem + ".json"))
        index["keyframes"].append(stem)
    json_dump(index, os.path.join(directory, "index.json"))


def load_keyframes(directory):
    from .camera import Intrinsics as _K
    from .zernike import read_pgm

    with open(os.path.join(directory, "index.json"), encoding="utf-8") as fh:
        index = json.load(fh)
    K = _K(**index["camera"])
    out = []
    for stem in index["keyframes"]:
        with open(os.path.join(directory, stem + ".json"), encoding="utf-8") as fh:
            c = json.load(fh)
        pts = c["points"]
        edges = c["edges"]
        out.append(Keyframe(
            c["id"], se3.Pose(np.array(c["pose"]["R"]), np.array(c["pose"]["t"]), check=False),
            np.nan if c["az_deg"] is None else c["az_deg"], np.nan if c["el_deg"] is None else c["el_deg"],
            read_pgm(os.path.join(directory, stem + ".pgm")),
            read_depth(os.path.join(directory, stem + ".depth")),
            np.array([p["p"] for p in pts]).reshape(-1, 3), np.array([p["z"] for p in pts]).reshape(-1, 2),
            np.array([p["id"] for p in pts], dtype=int),
            np.array([p["desc"] for p in pts]).reshape(-1, DESCRIPTOR_DIM),
            np.array([e["p"] for e in edges]).reshape(-1, 3), np.array([e["z"] for e in edges]).reshape(-1, 2),
            np.array([e["keyline"] for e in edges], dtype=int),
            np.array(c["keylines"]).reshape(-1, 2, 2), np.array(c["keylines3d"]).reshape(-1, 2, 3),
            np.array(c["contour"]).reshape(-1, 2),
            np.array([e["dir"] for e in edges]).reshape(-1, 3) if edges and all("dir" in e for e in edges) else None,
            np.array([e.get("normals", np.full((2, 3), np.nan)) for e in edges], dtype=float).reshape(-1, 2, 3),
            np.array([e.get("inside", np.full(3, np.nan)) for e in edges], dtype=float).reshape(-1, 3)))
    return out, K


# ---------------------------------------------------------------------------
# trajectories

@dataclass
class TrajectoryConfig:
    """Constant-twist relative trajectory and measurement corruption settings.

    Units: translation m, twist (m/s, rad/s), rate Hz, duration s, noise px.
    """

    initial_t: tuple = (0.0, 0.0, 50.0)
    initial_q: tuple = (-np.sqrt(0.5), 0.0, -np.sqrt(0.5), 0.0)  # scalar last
    twist: tuple = (-50.0 * np.radians(3.5), 0.0, 0.0, 0.0, np.radians(3.5), 0.0)
    rate_hz: float = 10.0
    duration_s: float = 250.0
    noise_px: float = 1.0
    outlier_fraction: float = 0.2
    confusion: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise ValueError("frame rate must be positive")
        if not 0 <= self.outlier_fraction < 1 or not 0 <= self.confusion < 1:
            raise ValueError("fractions must lie in [0, 1)")

    @property
    def initial_pose(self):
        return se3.Pose.from_quat(np.asarray(self.initial_q), np.asarray(self.initial_t))

    def to_dict(self):
        return {"version": 1, "initial_t": list(self.initial_t), "initial_q": list(self.initial_q),
                "twist": list(self.twist), "rate_hz": self.rate_hz, "duration_s": self.duration_s,
                "noise_px": self.noise_px, "outlier_fraction": self.outlier_fraction,
                "confusion": self.confusion, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        from .errors import ConfigError

        d = dict(d)
        if d.pop("version", None) != 1:
            raise ConfigError("trajectory config needs version 1")
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown trajectory fields: {sorted(extra)}")
        for k in ("initial_t", "initial_q", "twist"):
            if k in d:
                d[k] = tuple(float(x) for x in d[k])
        return cls(**d)


def circular_twist(spin_deg_s, axis=(0.0, 1.0, 0.0), centre=(0.0, 0.0, 50.0)):
    """Twist spinning the target about ``axis`` (camera frame) through ``centre``."""
    w = np.radians(spin_deg_s) * np.asarray(axis, dtype=float) / np.linalg.norm(axis)
    nu = -np.cross(w, np.asarray(centre, dtype=float))
    return np.concatenate([nu, w])


def constant_twist_trajectory(config: TrajectoryConfig, t0=0.0):
    """``[(t, exp(t w) T0)]`` sampled at the frame rate over the duration (inclusive)."""
    T0 = config.initial_pose
    w = np.asarray(config.twist, dtype=float)
    n = int(round(config.duration_s * config.rate_hz))
    return [(t0 + k / config.rate_hz, se3.exp_se3((k / config.rate_hz) * w) @ T0) for k in range(n + 1)]


# ---------------------------------------------------------------------------
# training augmentation

def augment_training(mask, count=4, rng=None, max_radius=2, max_tilt_deg=3.0, strength=1.0):
    """Perturbed copies of a silhouette.

    Each variant gets a morphological dilation or erosion of radius 1..max_radius
    (emulating segmentation thresholds) and a small out-of-plane tilt warp.
    ``strength = 0`` returns plain copies.
    """
    from scipy.ndimage import binary_dilation, binary_erosion
    from skimage.transform import ProjectiveTransform, warp

    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise EmptySilhouette("cannot augment an empty mask")
    if strength == 0:
        return [mask.copy() for _ in range(count)]
    rng = np.random.default_rng(rng)
    H, W = mask.shape
    rows, cols = np.nonzero(mask)
    cy, cx = rows.mean(), cols.mean()
    f = max(H, W)
    out = []
    for _ in range(count):
        m = mask
        r = int(rng.integers(0, max_radius + 1) * strength) if max_radius else 0
        if r:
            m = binary_dilation(m, iterations=r) if rng.random() < 0.5 else binary_erosion(m, iterations=r)
        if max_tilt_deg:
            a, b = np.radians(rng.uniform(-max_tilt_deg, max_tilt_deg, 2) * strength)
            # homography of a rotation about the image axes through the centroid
            Kc = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
            R = se3.exp_so3([a, b, 0.0])
            Hm = Kc @ R @ np.linalg.inv(Kc)
            m = warp(m.astype(float), ProjectiveTransform(np.linalg.inv(Hm)), order=0, preserve_range=True) > 0.5
        if not m.any():
            m = mask.copy()
        out.append(m)
    return out


# ---------------------------------------------------------------------------
# correspondence simulation

def grid_bin(points, bbox, p, q):
    """Cell index ``row * p + col`` of each point in a p x q grid over ``bbox``.

    ``bbox = (xmin, ymin, xmax, ymax)``; p columns along x, q rows along y.
    Points on a cell boundary go to the lower-index cell; points outside are
    clamped to the border cells.
    """
    if p < 1 or q < 1:
        raise ValueError("grid needs at least one cell per axis")
    P = np.atleast_2d(np.asarray(points, dtype=float))
    x0, y0, x1, y1 = bbox
    w = max((x1 - x0) / p, 1e-12)
    h = max((y1 - y0) / q, 1e-12)
    col = np.clip(np.ceil((P[:, 0] - x0) / w).astype(int) - 1, 0, p - 1)
    row = np.clip(np.ceil((P[:, 1] - y0) / h).astype(int) - 1, 0, q - 1)
    return row * p + col


def mask_bbox(mask):
    rows, cols = np.nonzero(mask)
    if not len(rows):
        raise EmptySilhouette("mask is empty")
    return float(cols.min()), float(rows.min()), float(cols.max()), float(rows.max())


@dataclass
class Observation:
    """One simulated query frame.

    ``ids`` are the catalog ids the detector believes it saw; ``true_ids``
    the ids of the features that actually produced each detection
    (-1 for spurious detections).
    """

    points2d: np.ndarray
    descriptors: np.ndarray
    ids: np.ndarray
    true_ids: np.ndarray
    outlier: np.ndarray
    confused: np.ndarray
    mask: np.ndarray
    contour: np.ndarray
    pose: se3.Pose
    edges: EdgeMatches = None


def visible_points(K, T, points, depth, tol=0.01):
    """Bool mask of points in front, inside the image, and not occluded in ``depth``."""
    pc = points @ T.R.T + T.t
    zc = pc[:, 2]
    ok = zc > NEAR_PLANE
    uv = np.zeros((len(points), 2))
    uv[ok] = np.column_stack([K.fx * pc[ok, 0] / zc[ok] + K.d1, K.fy * pc[ok, 1] / zc[ok] + K.d2])
    c = np.round(uv[:, 0]).astype(int)
    r = np.round(uv[:, 1]).astype(int)
    ok &= (c >= 0) & (c < K.width) & (r >= 0) & (r < K.height)
    d = np.zeros(len(points))
    d[ok] = depth[r[ok], c[ok]]
    ok &= (d > 0) & (zc <= d + tol * np.maximum(d, 1.0))
    return ok


def simulate_correspondences(keyframe: Keyframe, true_pose, K: Intrinsics, mesh=None, noise=1.0,
                             outlier_fraction=0.0, confusion=0.0, seed=0, grid=(8, 8),
                             descriptor_noise=0.15, render=None):
    """Detections of the keyframe's catalog features in a query frame.

    Visible catalog points are projected under the true pose and perturbed
    by Gaussian pixel noise.  ``floor(outlier_fraction * n)`` of them are
    replaced by spurious detections uniform over the target's image bounding
    box with random descriptors.  A ``confusion`` fraction of the remaining
    detections carries the id of another feature falling in the same grid
    cell and a descriptor blended towards that feature's.
    """
    rng = np.random.default_rng(seed)
    if render is None:
        if mesh is None:
            raise ValueError("need a mesh or a pre-rendered (mask, depth)")
        render = rasterize(mesh, K, true_pose)
    mask, depth = render
    if not mask.any():
        raise EmptySilhouette("target not visible in the query frame")
    vis = visible_points(K, true_pose, keyframe.points3d, depth) if len(keyframe.points3d) else np.zeros(0, bool)
    idx = np.flatnonzero(vis)
    n = len(idx)
    z = project(K, true_pose, keyframe.points3d[idx]) if n else np.zeros((0, 2))
    z = z + rng.normal(scale=noise, size=z.shape) if noise else z
    ids = keyframe.point_ids[idx].copy()
    true_ids = ids.copy()
    desc = keyframe.descriptors[idx] + rng.normal(scale=descriptor_noise, size=(n, DESCRIPTOR_DIM))
    outlier = np.zeros(n, bool)
    confused = np.zeros(n, bool)
    bbox = mask_bbox(mask)
    n_out = int(np.floor(outlier_fraction * n))
    if n_out:
        o = rng.choice(n, n_out, replace=False)
        outlier[o] = True
        z[o] = rng.uniform([bbox[0], bbox[1]], [bbox[2], bbox[3]], size=(n_out, 2))
        d = rng.normal(size=(n_out, DESCRIPTOR_DIM))
        desc[o] = d / np.linalg.norm(d, axis=1, keepdims=True)
        true_ids[o] = -1
    if confusion and n:
        cells = grid_bin(z, bbox, *grid)
        cand = np.flatnonzero(~outlier)
        n_conf = int(np.floor(confusion * len(cand)))
        for i in rng.choice(cand, n_conf, replace=False) if n_conf else []:
            same = np.flatnonzero((cells == cells[i]) & ~outlier & (np.arange(n) != i))
            if not len(same):
                continue
            j = rng.choice(same)
            ids[i] = keyframe.point_ids[idx[j]]
            mix = CONFUSION_BLEND * keyframe.descriptors[idx[j]] + (1 - CONFUSION_BLEND) * keyframe.descriptors[idx[i]]
            desc[i] = mix / np.linalg.norm(mix) + rng.normal(scale=descriptor_noise, size=DESCRIPTOR_DIM)
            confused[i] = True
    contour = boundary_polyline(mask)
    edges = perpendicular_edge_matches(keyframe, K, true_pose, contour, noise=noise, rng=rng)
    return Observation(z, desc, ids, true_ids, outlier, confused, mask, contour, true_pose, edges)


@dataclass
class EdgeMatches:
    """Edge control points paired with image lines fitted to the query boundary."""

    points3d: np.ndarray  # (m, 3)
    lines: np.ndarray     # (m, 3), unit (l1, l2)
    keyline: np.ndarray   # (m,)
    offset: np.ndarray    # (m,) signed search distance, px

    def __len__(self):
        return len(self.points3d)

    @classmethod
    def empty(cls):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0, int), np.zeros(0))


def _project_front(K, T, P):
    pc = np.asarray(P, dtype=float).reshape(-1, 3) @ T.R.T + T.t
    ok = pc[:, 2] > NEAR_PLANE
    uv = np.full((len(pc), 2), np.nan)
    uv[ok] = np.column_stack([K.fx * pc[ok, 0] / pc[ok, 2] + K.d1, K.fy * pc[ok, 1] / pc[ok, 2] + K.d2])
    return uv, ok


def contour_generator(normals, points, pose):
    """True where an edge point can lie on the outline seen from ``pose``.

    That needs one adjacent face turned towards the camera and the other
    away.  Points with unknown (NaN) normals are kept.
    """
    c = -pose.R.T @ pose.t
    v = c - np.asarray(points, dtype=float)
    s = np.einsum("mkj,mj->mk", np.asarray(normals, dtype=float), v)
    unknown = np.isnan(s).any(axis=1)
    return unknown | (s[:, 0] * s[:, 1] <= 0)


def perpendicular_edge_matches(keyframe: Keyframe, K: Intrinsics, pose, contour, search_px=12.0,
                               fit_radius=3.0, max_angle_deg=30.0, noise=0.0, rng=None):
    """Match edge control points to the query silhouette boundary.

    Each control point and its keyline are projected under ``pose``; the
    boundary polyline is searched along the keyline normal within
    ``search_px`` and the nearest crossing is kept.  The measured line is a
    total-least-squares fit to the boundary points within ``fit_radius`` of
    the crossing, rejected if it turns by more than ``max_angle_deg`` from
    the predicted keyline.  ``noise`` shifts each line along its normal.
    """
    if not len(keyframe.edges3d) or contour is None or len(contour) < 3:
        return EdgeMatches.empty()
    uv, ok = _project_front(K, pose, keyframe.edges3d)
    kl = keyframe.edge_keyline
    if keyframe.edge_normals is not None:
        ok &= contour_generator(keyframe.edge_normals, keyframe.edges3d, pose)
    if keyframe.edge_dirs3d is not None:
        # local image direction of the supporting mesh edge
        h = 1e-2
        fwd, ok_f = _project_front(K, pose, keyframe.edges3d + h * keyframe.edge_dirs3d)
        bwd, ok_b = _project_front(K, pose, keyframe.edges3d - h * keyframe.edge_dirs3d)
        ok &= ok_f & ok_b
        seg_dir = fwd - bwd
    else:
        ends, ok_e = _project_front(K, pose, keyframe.keylines3d.reshape(-1, 3))
        ends = ends.reshape(-1, 2, 2)
        ok &= ok_e.reshape(-1, 2).all(axis=1)[kl]
        seg_dir = ends[kl, 1] - ends[kl, 0]
    idx = np.flatnonzero(ok)
    if not len(idx):
        return EdgeMatches.empty()
    d = seg_dir[idx]
    dn = np.linalg.norm(d, axis=1)
    good = dn > 1e-9
    idx, d, dn = idx[good], d[good], dn[good]
    d = d / dn[:, None]
    nrm = np.column_stack([-d[:, 1], d[:, 0]])
    u = uv[idx]

    A = np.asarray(contour, dtype=float)
    E = np.roll(A, -1, axis=0) - A
    if keyframe.edge_inside3d is not None:
        # object lies left of each segment for a positive signed area
        area2 = float(np.sum(A[:, 0] * np.roll(A[:, 1], -1) - np.roll(A[:, 0], -1) * A[:, 1]))
        inward = np.sign(area2) * np.column_stack([-E[:, 1], E[:, 0]])
        P_in = keyframe.edges3d[idx] + 1e-2 * np.nan_to_num(keyframe.edge_inside3d[idx])
        q, ok_q = _project_front(K, pose, P_in)
        q = q - u
        known = ~np.isnan(keyframe.edge_inside3d[idx]).any(axis=1) & ok_q
        polar = ~known[:, None] | (q @ inward.T > 0)
    else:
        polar = True
    # solve u + s n = A + r E for every (point, segment) pair (Cramer's rule)
    den = -nrm[:, None, 0] * E[None, :, 1] + nrm[:, None, 1] * E[None, :, 0]
    w = A[None, :, :] - u[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        s = (-w[..., 0] * E[None, :, 1] + w[..., 1] * E[None, :, 0]) / den
        r = (nrm[:, None, 0] * w[..., 1] - nrm[:, None, 1] * w[..., 0]) / den
    hit = (np.abs(den) > 1e-12) & (r >= 0) & (r < 1) & (np.abs(s) <= search_px) & polar
    s_abs = np.where(hit, np.abs(s), np.inf)
    best = np.argmin(s_abs, axis=1)
    found = np.isfinite(s_abs[np.arange(len(idx)), best])

    rng = np.random.default_rng(rng)
    cos_max = np.cos(np.radians(max_angle_deg))
    pts, lines, kls, offs = [], [], [], []
    for m in np.flatnonzero(found):
        sm = s[m, best[m]]
        x = u[m] + sm * nrm[m]
        near = A[np.linalg.norm(A - x, axis=1) <= fit_radius]
        if len(near) < 2:
            continue
        c = near.mean(axis=0)
        t = np.linalg.svd(near - c)[2][0]
        if abs(t @ d[m]) < cos_max:
            continue
        ln = np.array([-t[1], t[0]])
        off = -(ln @ x)
        if noise:
            off += rng.normal(scale=noise)
        pts.append(keyframe.edges3d[idx[m]])
        lines.append([ln[0], ln[1], off])
        kls.append(kl[idx[m]])
        offs.append(sm)
    if not pts:
        return EdgeMatches.empty()
    return EdgeMatches(np.array(pts), np.array(lines), np.array(kls, dtype=int), np.array(offs))
