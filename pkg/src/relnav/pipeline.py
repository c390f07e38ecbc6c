"""Online relative-navigation loop.

Coarse view classification seeds the first pose; afterwards every frame is
handled by predicting with the filter, picking the keyframe whose attitude
is closest to the prediction, matching features (by tracking, falling back
to brute-force detection), fitting robust pose pseudo-measurements for
points and edges separately, gating them on residual RMSE and fusing the
survivors.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ekf, robust, scene, se3
from ._jsonio import dump as json_dump
from .camera import Intrinsics
from .contour import align_candidates, orient_ccw, resample_contour
from .errors import (ConfigError, DegenerateContour, EmptySilhouette, NoMatches, RankDeficient,
                     RelNavError)
from .mixture import ClassDatabase, classify, train_database
from .zernike import mask_feature

CONFIG_VERSION = 1
NEES_BOUNDS_12 = (4.404, 23.337)  # two-sided 95% interval of chi-square with 12 dof


def tracking_camera():
    """640x480 camera used by the tracking runs (53.06 x 36.82 deg field of view)."""
    return Intrinsics.from_fov(640, 480, 53.06, 36.82)


# ---------------------------------------------------------------------------
# coarse classifier training

@dataclass
class ClassifierConfig:
    """How the view classifier is trained.

    Views are drawn uniformly inside every (azimuth, elevation) bin with a
    random roll about the boresight; each render contributes itself plus
    ``augment`` perturbed copies.
    """

    az_width: float = 10.0
    el_width: float = 10.0
    views_per_class: int = 24
    augment: int = 4
    image_size: int = 128
    focal: float = 380.0
    distance: float = 40.0
    n_max: int = 10
    d: int = 16
    n_components: int = 5
    seed: int = 0

    def bin_center(self, az_bin, el_bin):
        return (az_bin + 0.5) * self.az_width, -90.0 + (el_bin + 0.5) * self.el_width

    @property
    def camera(self):
        c = self.image_size / 2.0
        return Intrinsics(self.focal, self.focal, c, c, self.image_size, self.image_size)


def rolled(pose: se3.Pose, roll):
    """Rotate the camera about its boresight by ``roll`` radians."""
    return se3.Pose(se3.exp_so3([0.0, 0.0, roll]), np.zeros(3), check=False) @ pose


def training_views(cfg: ClassifierConfig, az_bin, el_bin):
    """The (az, el, pose) renders that train one class, reproducible from the seed."""
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, az_bin, el_bin, 0]))
    out = []
    for _ in range(cfg.views_per_class):
        az = (az_bin + rng.uniform()) * cfg.az_width
        el = -90.0 + (el_bin + rng.uniform()) * cfg.el_width
        out.append((az, el, rolled(scene.view_pose(az, el, cfg.distance), rng.uniform(-np.pi, np.pi))))
    return out


def class_features(mesh, cfg: ClassifierConfig, bins=None):
    """``{(az_bin, el_bin): (n, d) features}`` from jittered, augmented renders."""
    n_az = int(round(360.0 / cfg.az_width))
    n_el = int(round(180.0 / cfg.el_width))
    bins = [(i, j) for j in range(n_el) for i in range(n_az)] if bins is None else list(bins)
    K = cfg.camera
    out = {}
    for (i, j) in bins:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, i, j, 1]))
        feats = []
        for _, _, T in training_views(cfg, i, j):
            mask, _ = scene.rasterize(mesh, K, T)
            variants = [mask] + (scene.augment_training(mask, cfg.augment, rng=rng) if cfg.augment else [])
            feats += [mask_feature(m, cfg.n_max, cfg.d) for m in variants]
        out[(i, j)] = np.array(feats)
    return out


def train_classifier(mesh, cfg: ClassifierConfig, features=None):
    feats = class_features(mesh, cfg) if features is None else features
    db = train_database(feats, cfg.az_width, cfg.el_width, cfg.n_components, seed=cfg.seed)
    db.meta.update({"n_max": cfg.n_max, "classifier": asdict(cfg)})
    return db


def isotropic_mask(mask, K: Intrinsics):
    """Resample a silhouette so both pixel axes share the x focal length."""
    if K.fx == K.fy:
        return np.asarray(mask, dtype=bool)
    from skimage.transform import rescale

    return rescale(np.asarray(mask, dtype=float), (K.fx / K.fy, 1.0), order=0) > 0.5


def query_feature(mask, K: Intrinsics, db: ClassDatabase):
    n_max = int(db.meta.get("n_max", 10))
    return mask_feature(isotropic_mask(mask, K), n_max, db.d)


# ---------------------------------------------------------------------------
# keyframes

class KeyframeSet:
    """Viewsphere keyframes, built on first use unless supplied up front."""

    def __init__(self, mesh, K: Intrinsics, az_step=9.0, el_step=9.0, distance=50.0, density=300,
                 seed=0, mode="bands", keyframes=None):
        self.mesh = mesh
        self.K = K
        self.density = density
        self.seed = seed
        if keyframes is not None:
            self.views = [scene.ViewSample(k.az, k.el, k.pose) for k in keyframes]
            self._cache = {i: k for i, k in enumerate(keyframes)}
        else:
            self.views = scene.sample_viewsphere(az_step, el_step, distance, mode)
            self._cache = {}
        self.rotations = np.array([v.pose.R for v in self.views])
        dirs = np.array([-v.pose.R.T @ v.pose.t for v in self.views])
        self.directions = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def __len__(self):
        return len(self.views)

    def get(self, i) -> scene.Keyframe:
        if i not in self._cache:
            v = self.views[i]
            seed = np.random.SeedSequence([self.seed, i])
            self._cache[i] = scene.build_keyframe(self.mesh, self.K, v.pose, self.density,
                                                  np.random.default_rng(seed), i, az=v.az, el=v.el)
        return self._cache[i]

    def all(self):
        return [self.get(i) for i in range(len(self))]

    def geodesic_distances(self, R):
        """Rotation angle of ``R_kf R^T`` for every keyframe."""
        tr = np.einsum("nij,ij->n", self.rotations, np.asarray(R))
        return np.arccos(np.clip((tr - 1.0) / 2.0, -1.0, 1.0))

    def view_distances(self, R):
        """Angle between each keyframe's boresight and that of ``R``, both in the target frame.

        This is the geodesic distance minimized over a roll about the
        boresight, so it ignores the viewsphere's up-vector convention.
        """
        b = np.asarray(R)[2]
        return np.arccos(np.clip(self.rotations[:, 2, :] @ b, -1.0, 1.0))

    def nearest(self, R, metric="view"):
        d = self.view_distances(R) if metric == "view" else self.geodesic_distances(R)
        return int(np.argmin(d))

    def nearest_direction(self, az_deg, el_deg):
        az, el = np.radians(az_deg), np.radians(el_deg)
        d = np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        return int(np.argmax(self.directions @ d))


# ---------------------------------------------------------------------------
# frames

@dataclass
class Frame:
    """One image's worth of measurements.

    ``detect(kf)`` yields the simulated detections of a keyframe's catalog
    and ``edges(kf, pose)`` runs the perpendicular boundary search.  A
    blacked-out frame carries no measurements at all.
    """

    t: float
    mask: np.ndarray
    contour: np.ndarray
    truth: se3.Pose = None
    truth_twist: np.ndarray = None
    blackout: bool = False
    detector: object = field(default=None, repr=False)
    edge_search: object = field(default=None, repr=False)

    def detect(self, kf):
        if self.blackout or self.detector is None:
            return None
        return self.detector(kf)

    def edges(self, kf, pose, search_px):
        if self.blackout or self.edge_search is None:
            return scene.EdgeMatches.empty()
        return self.edge_search(kf, pose, search_px)


class SimulatedCamera:
    """Renders the target along a trajectory and simulates detections per keyframe."""

    def __init__(self, mesh, K: Intrinsics, traj: scene.TrajectoryConfig, blackout=(),
                 descriptor_noise=0.15):
        self.mesh = mesh
        self.K = K
        self.traj = traj
        self.blackout = set(blackout)
        self.descriptor_noise = descriptor_noise

    def frames(self):
        cfg = self.traj
        twist = np.asarray(cfg.twist, dtype=float)
        for k, (t, T) in enumerate(scene.constant_twist_trajectory(cfg)):
            yield self.frame(k, t, T, twist)

    def frame(self, k, t, T, twist):
        cfg = self.traj
        render = scene.rasterize(self.mesh, self.K, T)
        mask = render[0]
        contour = scene.boundary_polyline(mask) if mask.any() else None

        def detector(kf):
            ss = np.random.SeedSequence([cfg.seed, k, kf.kf_id, 0])
            return scene.simulate_correspondences(
                kf, T, self.K, noise=cfg.noise_px, outlier_fraction=cfg.outlier_fraction,
                confusion=cfg.confusion, seed=np.random.default_rng(ss), render=render,
                descriptor_noise=self.descriptor_noise)

        def edge_search(kf, pose, search_px):
            ss = np.random.SeedSequence([cfg.seed, k, kf.kf_id, 1])
            return scene.perpendicular_edge_matches(kf, self.K, pose, contour, search_px=search_px,
                                                    noise=cfg.noise_px, rng=np.random.default_rng(ss))

        return Frame(t, mask, contour, T, twist, k in self.blackout,
                     detector if mask.any() else None, edge_search if contour is not None else None)


# ---------------------------------------------------------------------------
# matching

@dataclass
class PointMatches:
    points3d: np.ndarray
    points2d: np.ndarray
    catalog_index: np.ndarray
    detection_index: np.ndarray
    candidates: np.ndarray  # candidate-set size per accepted match
    correct: np.ndarray = None  # against simulation ground truth, when known

    def __len__(self):
        return len(self.points3d)

    @property
    def precision(self):
        return float(np.mean(self.correct)) if self.correct is not None and len(self) else float("nan")


def _ratio_test(dist, ratio, max_dist):
    """Best index per row and whether it passes the nearest-neighbour distance ratio."""
    order = np.argsort(dist, axis=1)
    best = order[:, 0]
    d1 = dist[np.arange(len(dist)), best]
    if dist.shape[1] > 1:
        d2 = dist[np.arange(len(dist)), order[:, 1]]
        ok = d1 < ratio * d2
    else:
        ok = np.ones(len(dist), bool)
    return best, ok & (d1 < max_dist)


def _package(obs, kf, det, cat, cand):
    det = np.asarray(det, dtype=int)
    cat = np.asarray(cat, dtype=int)
    correct = kf.point_ids[cat] == obs.true_ids[det] if len(det) else np.zeros(0, bool)
    return PointMatches(kf.points3d[cat], obs.points2d[det], cat, det, np.asarray(cand, dtype=int), correct)


def match_by_detection(obs: scene.Observation, kf: scene.Keyframe, ratio=0.8, max_dist=1.2):
    """Brute-force descriptor matching against the whole keyframe catalog."""
    if obs is None or not len(kf.points3d) or not len(obs.points2d):
        raise NoMatches("nothing to match")
    dist = np.linalg.norm(obs.descriptors[:, None, :] - kf.descriptors[None, :, :], axis=2)
    best, ok = _ratio_test(dist, ratio, max_dist)
    det = np.flatnonzero(ok)
    if not len(det):
        raise NoMatches("no descriptor passed the ratio test")
    return _package(obs, kf, det, best[det], np.full(len(det), len(kf.points3d)))


def match_by_tracking(obs: scene.Observation, kf: scene.Keyframe, pose, K: Intrinsics, grid=(8, 8),
                      ratio=0.8, max_dist=1.2, neighbors=1, gate_px=None):
    """Grid-restricted matching around the catalog's reprojection under ``pose``.

    Catalog points are projected with the predicted pose and binned on a
    ``p x q`` grid over the query silhouette's bounding box; each detection
    is compared only with the catalog points in its own cell and the
    ``neighbors``-ring of cells around it.  With ``gate_px`` a match is also
    dropped when the detection lies farther than that from the predicted
    projection of its catalog point.
    """
    if obs is None or not len(kf.points3d) or not len(obs.points2d):
        raise NoMatches("nothing to match")
    uv, front = scene._project_front(K, pose, kf.points3d)
    inside = front & (uv[:, 0] >= 0) & (uv[:, 0] < K.width) & (uv[:, 1] >= 0) & (uv[:, 1] < K.height)
    if not inside.any():
        raise NoMatches("predicted pose puts the catalog outside the image")
    p, q = grid
    bbox = scene.mask_bbox(obs.mask)
    idx = np.flatnonzero(inside)
    cat_cells = scene.grid_bin(uv[idx], bbox, p, q)
    det_cells = scene.grid_bin(obs.points2d, bbox, p, q)
    cat_rc = np.column_stack([cat_cells // p, cat_cells % p])
    dets, cats, cands = [], [], []
    for cell in np.unique(det_cells):
        r, c = divmod(int(cell), p)
        near = (np.abs(cat_rc[:, 0] - r) <= neighbors) & (np.abs(cat_rc[:, 1] - c) <= neighbors)
        members = idx[near]
        if not len(members):
            continue
        qi = np.flatnonzero(det_cells == cell)
        dist = np.linalg.norm(obs.descriptors[qi, None, :] - kf.descriptors[None, members, :], axis=2)
        best, ok = _ratio_test(dist, ratio, max_dist)
        if gate_px is not None:
            ok &= np.linalg.norm(obs.points2d[qi] - uv[members[best]], axis=1) <= gate_px
        dets += list(qi[ok])
        cats += list(members[best[ok]])
        cands += [len(members)] * int(ok.sum())
    if not dets:
        raise NoMatches("no catalog point shares a cell with an accepted detection")
    return _package(obs, kf, dets, cats, cands)


# ---------------------------------------------------------------------------
# configuration

def _default_robust():
    # the scale floor keeps the joint scale from collapsing on exact data
    return robust.RobustConfig(max_iter=30, tukey_polish=5, sigma_floor=0.1)


def _robust_from(d):
    return robust.RobustConfig(**d) if isinstance(d, dict) else d


@dataclass
class PipelineConfig:
    """Online loop settings; units px, m, s, rad."""

    class_db: str = None
    keyframe_db: str = None
    robust_points: robust.RobustConfig = field(default_factory=lambda: _default_robust())
    robust_edges: robust.RobustConfig = field(default_factory=lambda: _default_robust())
    gates: dict = field(default_factory=lambda: dict(ekf.GATE_PX))
    process_noise: ekf.ProcessNoise = field(default_factory=lambda: ekf.ProcessNoise(1e-9, 1e-12))
    p0_sigmas: tuple = (1.0, 0.05, 5.0, 0.1)  # position, attitude, velocity, rate
    grid: tuple = (8, 8)
    grid_neighbors: int = 1
    track_gate_px: float = 5.0  # max distance from the predicted reprojection; None disables
    nndr: float = 0.8
    descriptor_max: float = 1.2
    edge_search_px: float = 12.0
    use_edges: bool = True
    min_points: int = 12
    min_edges: int = 12
    noise_floor_px: dict = field(default_factory=lambda: {"points": 0.1, "edges": 0.0})
    edge_offset_px: float = 0.5  # per-keyline shared offset in the edge covariance
    # Edge fits are consistent in the median but carry aspect-dependent bias that
    # persists over many frames; the variance factor stops the filter from
    # averaging it down as if it were independent noise.
    edge_cov_inflation: float = 16.0
    innovation_gate: float = 22.46  # chi-square(6) 0.999 quantile; None disables
    reinit_after: int = 30
    init_candidates: int = 3
    roll_hypotheses: int = 3
    keyframe_metric: str = "view"  # view | geodesic
    settle_time: float = 20.0

    def __post_init__(self):
        if any(not v > 0 for v in self.gates.values()):
            raise ConfigError("gate thresholds must be positive")
        self.robust_points = _robust_from(self.robust_points)
        self.robust_edges = _robust_from(self.robust_edges)
        if isinstance(self.process_noise, dict):
            self.process_noise = ekf.ProcessNoise(**self.process_noise)

    def to_dict(self):
        d = asdict(self)
        d["version"] = CONFIG_VERSION
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.pop("version", None) != CONFIG_VERSION:
            raise ConfigError(f"pipeline config needs version {CONFIG_VERSION}")
        extra = set(d) - set(cls.__dataclass_fields__)
        if extra:
            raise ConfigError(f"unknown pipeline fields: {sorted(extra)}")
        for k in ("p0_sigmas", "grid"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------------------
# measurements

def _measurement(problem, est: robust.PoseEstimate, source, floor_px, clusters=None, cluster_px=0.0):
    """Pose pseudo-measurement with covariance from the inlier residual scale.

    ``floor_px`` is added in quadrature to the white residual scale.  When
    ``clusters`` labels each correspondence, a shared offset of standard
    deviation ``cluster_px`` per label is added: boundary quantization moves
    every control point of one straight edge together, which the white term
    alone would average away.
    """
    r, J = problem.evaluate(est.pose)
    groups = problem.groups
    rows = est.inliers[groups]
    m = int(rows.sum())
    if m <= 12:
        raise RankDeficient("too few inlier rows for a pose covariance")
    s2 = float(np.sum(r[rows] ** 2)) / (m - 6) + floor_px**2
    R = robust.covariance_backprop(J, np.sqrt(s2), rows)
    if clusters is not None and cluster_px > 0:
        Ainv = R / s2
        lab = np.asarray(clusters)[groups][rows]
        Jr = J[rows]
        B = np.zeros((6, 6))
        for g in np.unique(lab):
            v = Jr[lab == g].sum(axis=0)
            B += np.outer(v, v)
        R = R + cluster_px**2 * Ainv @ B @ Ainv
        R = 0.5 * (R + R.T)
    return ekf.PoseMeasurement(est.pose, R, source, est.rmse)


def fit_points(K, matches: PointMatches, u0, cfg: robust.RobustConfig, floor_px=0.0):
    problem = robust.point_problem(K, matches.points3d, matches.points2d)
    est = robust.huber_joint_fit(problem, u0, cfg)
    return est, _measurement(problem, est, "points", floor_px)


def fit_edges(K, edges: scene.EdgeMatches, u0, cfg: robust.RobustConfig, floor_px=0.0, offset_px=0.0):
    problem = robust.line_problem(K, edges.points3d, edges.lines)
    est = robust.huber_joint_fit(problem, u0, cfg)
    return est, _measurement(problem, est, "edges", floor_px, edges.keyline, offset_px)


# ---------------------------------------------------------------------------
# results

@dataclass
class FrameResult:
    t: float
    keyframe: int
    mode: str                      # init | tracking | detection | predict | reinit
    measurements: dict             # source -> PoseMeasurement or None
    status: dict                   # source -> accepted | rejected | absent
    state: ekf.FilterState
    counts: dict = field(default_factory=dict)
    errors: dict = None            # only when truth is known
    truth: se3.Pose = field(default=None, repr=False)
    truth_twist: np.ndarray = field(default=None, repr=False)

    def trace_row(self):
        e = ekf.error_state(self.state, self.truth, self.truth_twist)
        return ekf.TraceRow(self.t, e[:6], e[6:], float(np.trace(self.state.P)), dict(self.status))


def pose_error(est: se3.Pose, truth: se3.Pose):
    """(position error / range, attitude error in degrees)."""
    est = est.to_pose() if isinstance(est, se3.QuatPose) else est
    rng = float(np.linalg.norm(truth.t))
    pos = float(np.linalg.norm(est.t - truth.t)) / rng
    att = float(np.degrees(se3.rotation_angle(truth.R @ est.R.T)))
    return pos, att


# ---------------------------------------------------------------------------
# the loop

class Pipeline:
    def __init__(self, keyframes: KeyframeSet, K: Intrinsics, config: PipelineConfig | None = None,
                 classifier: ClassDatabase | None = None, classifier_config: ClassifierConfig | None = None):
        self.keyframes = keyframes
        self.K = K
        self.config = config or PipelineConfig()
        self.classifier = classifier
        self.classifier_config = classifier_config or ClassifierConfig()
        self.state = None
        self.kf_index = None
        self.gated_run = 0
        self.results = []
        # overridable for fault injection: name -> callable
        self.matchers = {"tracking": self._track, "detection": self._detect}

    # -- initialization -------------------------------------------------

    def coarse_candidates(self, mask):
        """Keyframes for the top-ranked view classes (or all-keyframe contour search without a classifier)."""
        if not np.asarray(mask).any():
            raise EmptySilhouette("cannot initialize from an empty silhouette")
        if self.classifier is None:
            return list(range(len(self.keyframes))), None
        ranked = classify(self.classifier, query_feature(mask, self.K, self.classifier))
        out = []
        for cls, _ in ranked[: self.config.init_candidates]:
            k = self.class_keyframe(cls)
            if k not in out:
                out.append(k)
        return out, ranked

    def class_keyframe(self, cls):
        """Keyframe nearest to the centre of an (azimuth, elevation) class bin."""
        db = self.classifier
        azw = db.az_width if db is not None else self.classifier_config.az_width
        elw = db.el_width if db is not None else self.classifier_config.el_width
        i, j = cls
        return self.keyframes.nearest_direction((i + 0.5) * azw, -90.0 + (j + 0.5) * elw)

    def coarse_hypotheses(self, mask, contour, kf: scene.Keyframe, n=3):
        """Viewsphere poses corrected for in-plane rotation, apparent size and image offset.

        The query and keyframe boundaries are aligned in normalized image
        coordinates, one hypothesis per low cyclic-shift minimum (best
        first); range scales with the square root of the silhouette area
        ratio.  Returns ``[(pose, residual)]``.
        """
        K = self.K

        def norm(c):
            c = np.asarray(c, dtype=float)
            return np.column_stack([(c[:, 0] - K.d1) / K.fx, (c[:, 1] - K.d2) / K.fy])

        q = resample_contour(orient_ccw(norm(contour))).points
        k = resample_contour(orient_ccw(norm(kf.contour))).points
        d_kf = float(np.linalg.norm(kf.pose.t))
        Z = d_kf * np.sqrt(kf.area / max(np.asarray(mask).sum(), 1))
        out = []
        for tf, _, res in align_candidates(q, k, n):
            R = se3.exp_so3([0.0, 0.0, tf.theta]) @ kf.pose.R
            tx, ty = tf.t
            out.append((se3.Pose(R, [Z * tx, Z * ty, Z], check=False), res))
        return out

    def coarse_pose(self, mask, contour, kf: scene.Keyframe):
        """Best single contour-aligned hypothesis, ``(pose, residual)``."""
        return self.coarse_hypotheses(mask, contour, kf, 1)[0]

    def bin_center_pose(self, mask, kf: scene.Keyframe):
        """The keyframe's viewsphere attitude with range from apparent size, target on the boresight."""
        Z = float(np.linalg.norm(kf.pose.t)) * np.sqrt(kf.area / max(np.asarray(mask).sum(), 1))
        return se3.Pose(kf.pose.R, [0.0, 0.0, Z], check=False)

    def initialize(self, frame: Frame):
        """Classify, align contours, refine with detection matches; returns (keyframe id, pose)."""
        cands, _ = self.coarse_candidates(frame.mask)
        if self.classifier is None:
            # rank every keyframe by contour alignment quality and keep the best few
            scored = []
            for i in cands:
                try:
                    scored.append((self.coarse_pose(frame.mask, frame.contour, self.keyframes.get(i))[1], i))
                except (DegenerateContour, RankDeficient):
                    continue
            cands = [i for _, i in sorted(scored)[: self.config.init_candidates]]
        best = None
        for i in cands:
            kf = self.keyframes.get(i)
            try:
                hyps = self.coarse_hypotheses(frame.mask, frame.contour, kf, self.config.roll_hypotheses)
                m = match_by_detection(frame.detect(kf), kf, self.config.nndr, self.config.descriptor_max)
            except (RelNavError, ValueError):
                continue
            for T0, _ in hyps:
                try:
                    est, meas = fit_points(self.K, m, T0, self.config.robust_points,
                                           self.config.noise_floor_px["points"])
                except (RelNavError, ValueError):
                    continue
                score = (not ekf.gate(meas, self.config.gates), -int(est.inliers.sum()), est.rmse)
                if best is None or score < best[0]:
                    best = (score, i, meas)
        if best is None:
            raise NoMatches("no candidate keyframe yielded a pose")
        _, i, meas = best
        self.seed_state(meas.pose, frame.t)
        self.kf_index = i
        return i, meas.pose

    def seed_state(self, pose, t, twist=None, P=None):
        """Start the filter from a known pose (twist zero and the configured prior unless given)."""
        P0 = ekf.initial_covariance(*self.config.p0_sigmas) if P is None else P
        self.state = ekf.FilterState(pose, np.zeros(6) if twist is None else twist, P0, t)
        self.gated_run = 0
        return self.state

    # -- matching strategies --------------------------------------------

    def _track(self, frame, kf, pose):
        obs = frame.detect(kf)
        return match_by_tracking(obs, kf, pose, self.K, self.config.grid, self.config.nndr,
                                 self.config.descriptor_max, self.config.grid_neighbors,
                                 self.config.track_gate_px)

    def _detect(self, frame, kf, pose):
        obs = frame.detect(kf)
        return match_by_detection(obs, kf, self.config.nndr, self.config.descriptor_max)

    def detect_edges(self, frame, kf):
        """Edge matches without a prediction: perpendicular search around the contour-aligned pose.

        Returns ``(coarse pose, EdgeMatches)``.
        """
        T0, _ = self.coarse_pose(frame.mask, frame.contour, kf)
        return T0, frame.edges(kf, T0, self.config.edge_search_px)

    def _starts(self, frame, kf, pose, mode):
        yield pose
        if mode == "detection" and frame.contour is not None:
            # detection does not trust the prediction, so also start from the silhouette
            try:
                yield self.coarse_pose(frame.mask, frame.contour, kf)[0]
            except (RelNavError, ValueError):
                return

    def _point_measurement(self, frame, kf, pose):
        """Tracking first, detection if tracking fails to produce a gated-in fit."""
        tried = {}
        for mode in ("tracking", "detection"):
            try:
                m = self.matchers[mode](frame, kf, pose)
                if len(m) < self.config.min_points:
                    raise NoMatches(f"{len(m)} point matches")
            except (RelNavError, ValueError) as exc:
                tried[mode] = str(exc)
                continue
            for u0 in self._starts(frame, kf, pose, mode):
                try:
                    est, meas = fit_points(self.K, m, u0, self.config.robust_points,
                                           self.config.noise_floor_px["points"])
                except (RelNavError, ValueError) as exc:
                    tried[mode] = str(exc)
                    continue
                if ekf.gate(meas, self.config.gates):
                    return mode, m, est, meas, tried
                tried[mode] = f"gated (rmse {meas.rmse:.2f} px)"
        return None, None, None, None, tried

    def _edge_measurement(self, frame, kf, pose):
        edges = frame.edges(kf, pose, self.config.edge_search_px)
        if len(edges) < self.config.min_edges:
            return edges, None, None
        try:
            est, meas = fit_edges(self.K, edges, pose, self.config.robust_edges,
                                  self.config.noise_floor_px["edges"], self.config.edge_offset_px)
        except (RelNavError, ValueError):
            return edges, None, None
        if self.config.edge_cov_inflation != 1.0:
            meas = ekf.PoseMeasurement(meas.pose, meas.R * self.config.edge_cov_inflation, meas.source, meas.rmse)
        return edges, est, meas

    # -- one frame ------------------------------------------------------

    def step(self, frame: Frame, dt=None) -> FrameResult:
        if self.state is None:
            i, _ = self.initialize(frame)
            res = FrameResult(frame.t, i, "init", {}, {"points": "absent", "edges": "absent"}, self.state)
            return self._record(res, frame)
        dt = frame.t - self.state.t if dt is None else dt
        pred = ekf.predict(self.state, dt, self.config.process_noise)
        k = self.keyframes.nearest(pred.pose.R, self.config.keyframe_metric)
        kf = self.keyframes.get(k)
        status = {"points": "absent", "edges": "absent"}
        meas = {"points": None, "edges": None}
        counts = {}
        mode = "predict"
        state = pred
        if not frame.blackout and frame.detector is not None:
            pmode, m, est, pm, tried = self._point_measurement(frame, kf, pred.pose)
            if pm is not None:
                mode = pmode
                counts.update(matches=len(m), inliers=int(est.inliers.sum()),
                              precision=m.precision, candidates=float(np.mean(m.candidates)))
                meas["points"] = pm
                status["points"] = "accepted"
            else:
                status["points"] = "rejected" if tried else "absent"
            if self.config.use_edges:
                search_pose = pm.pose if pm is not None else pred.pose
                edges, eest, em = self._edge_measurement(frame, kf, search_pose)
                counts["edge_matches"] = len(edges)
                if em is not None:
                    meas["edges"] = em
                    status["edges"] = "accepted" if ekf.gate(em, self.config.gates) else "rejected"
                    counts["edge_inliers"] = int(eest.inliers.sum())
                elif len(edges):
                    status["edges"] = "rejected"
        for src in ("points", "edges"):
            if status[src] == "accepted":
                try:
                    d2 = ekf.nis(state, meas[src])
                    counts[f"{src}_nis"] = d2
                    if self.config.innovation_gate is not None and not d2 <= self.config.innovation_gate:
                        status[src] = "rejected"
                        continue
                    state = ekf.correct(state, meas[src])
                except (RelNavError, np.linalg.LinAlgError):
                    status[src] = "rejected"
        if "accepted" in status.values():
            self.gated_run = 0
        else:
            self.gated_run += 1
        self.state = state
        self.kf_index = k
        if self.gated_run >= self.config.reinit_after and not frame.blackout and frame.detector is not None:
            try:
                k, _ = self.initialize(frame)
                mode = "reinit"
            except RelNavError:
                pass
        return self._record(FrameResult(frame.t, k, mode, meas, status, self.state, counts), frame)

    def _record(self, res, frame):
        if frame.truth is not None:
            res.truth, res.truth_twist = frame.truth, frame.truth_twist
            pos, att = pose_error(res.state.pose, frame.truth)
            res.errors = {"position_frac": pos, "attitude_deg": att,
                          "nees": ekf.nees(res.state, frame.truth, frame.truth_twist)}
        self.results.append(res)
        return res

    # -- whole runs -----------------------------------------------------

    def run(self, frames, progress=None):
        t0 = time.perf_counter()
        for f in frames:
            self.step(f)
            if progress:
                progress(self.results[-1])
        self.wall_time = time.perf_counter() - t0
        return self.results


def summarize(results, settle_time=20.0, nees_bounds=NEES_BOUNDS_12):
    """Steady-state error statistics and per-frame counts."""
    if not results:
        return {}
    t0 = results[0].t
    frames = []
    for r in results:
        row = {"t": r.t, "keyframe": r.keyframe, "mode": r.mode, **r.status, **r.counts}
        if r.errors:
            row.update(r.errors)
        frames.append(row)
    out = {"frames": len(results), "per_frame": frames}
    steady = [r for r in results if r.errors and r.t - t0 >= settle_time]
    if steady:
        pos = np.array([r.errors["position_frac"] for r in steady])
        att = np.array([r.errors["attitude_deg"] for r in steady])
        nees = np.array([r.errors["nees"] for r in steady])
        out["steady_state"] = {
            "from_t": t0 + settle_time, "frames": len(steady),
            "position_frac_max": float(pos.max()), "position_frac_mean": float(pos.mean()),
            "position_frac_rms": float(np.sqrt(np.mean(pos**2))),
            "attitude_deg_max": float(att.max()), "attitude_deg_mean": float(att.mean()),
            "attitude_deg_rms": float(np.sqrt(np.mean(att**2))),
            "nees_in_envelope": float(np.mean((nees >= nees_bounds[0]) & (nees <= nees_bounds[1]))),
            "nees_below_upper": float(np.mean(nees <= nees_bounds[1])),
            "nees_mean": float(nees.mean()),
        }
    acc = {s: sum(r.status.get(s) == "accepted" for r in results) for s in ("points", "edges")}
    out["accepted"] = acc
    out["modes"] = {m: sum(r.mode == m for r in results) for m in sorted({r.mode for r in results})}
    return out


def write_outputs(results, out_dir, settle_time=20.0):
    """``trace.csv`` (filter errors vs truth) and ``summary.json``."""
    import os

    os.makedirs(out_dir, exist_ok=True)
    rows = [r.trace_row() for r in results if r.truth is not None]
    if rows:
        ekf.write_trace(os.path.join(out_dir, "trace.csv"), rows)
    summary = summarize(results, settle_time)
    json_dump(summary, os.path.join(out_dir, "summary.json"))
    return summary
