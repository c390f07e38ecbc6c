"""``relnav`` command line: train, classify, mest-bench, track, check.

Exit status is 0 on success, 1 when a check or assertion fails and 2 for
usage or input errors.  Every command that writes to ``--out`` leaves a
``manifest.json`` there recording the invocation and a content hash of its
inputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checks, mixture, pipeline as pl, plots, robust, scene
from ._jsonio import dump as json_dump
from ._jsonio import dumps as json_dumps
from .errors import ConfigError, RelNavError
from .zernike import read_pgm

MANIFEST_VERSION = 1


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config_paths: list
    seed: int
    input_hash: str
    out_dir: str
    arguments: dict

    def write(self):
        d = asdict(self)
        d["version"] = MANIFEST_VERSION
        json_dump(d, os.path.join(self.out_dir, "manifest.json"))


def content_hash(paths, extra=None):
    """sha1 over the bytes of every input file (directories recursively, sorted) plus ``extra``."""
    h = hashlib.sha1()
    for p in paths:
        if p is None:
            continue
        files = [p]
        if os.path.isdir(p):
            files = sorted(os.path.join(r, f) for r, _, fs in os.walk(p) for f in fs)
        for f in files:
            h.update(os.path.relpath(f, p).encode() if f != p else os.path.basename(p).encode())
            with open(f, "rb") as fh:
                h.update(fh.read())
    if extra is not None:
        h.update(json.dumps(extra, sort_keys=True, default=str).encode())
    return h.hexdigest()


def _manifest(args, inputs, configs):
    os.makedirs(args.out, exist_ok=True)
    argd = {k: v for k, v in sorted(vars(args).items()) if k not in ("func",)}
    hashed = {k: v for k, v in argd.items() if k not in ("out", "jobs")}
    RunManifest(args.command, [c for c in configs if c], args.seed,
                content_hash(list(inputs) + list(configs), hashed), args.out, argd).write()


def read_json_config(path):
    if path is None:
        return None
    if not os.path.exists(path):
        raise UsageError(f"config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def dataclass_from(cls, d, what):
    """Build ``cls`` from a versioned dict, rejecting unknown fields."""
    d = dict(d)
    if d.pop("version", None) != 1:
        raise ConfigError(f"{what} config needs version 1")
    names = {f.name for f in fields(cls)}
    extra = set(d) - names
    if extra:
        raise ConfigError(f"unknown {what} fields: {sorted(extra)}")
    try:
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{what}: {exc}") from None


def load_mesh(path):
    if path is None:
        return scene.load_target()
    if not os.path.exists(path):
        raise UsageError(f"mesh not found: {path}")
    return scene.load_obj(path)


# ---------------------------------------------------------------------------
# train

TRAIN_KEYFRAME_FIELDS = ("az_step", "el_step", "distance", "density")


def _features_chunk(job):
    mesh_path, cfg_dict, bins = job
    mesh = load_mesh(mesh_path)
    return pl.class_features(mesh, pl.ClassifierConfig(**cfg_dict), bins)


def class_features_parallel(mesh_path, mesh, cfg, jobs=1, bins=None):
    if bins is None:
        n_az = int(round(360.0 / cfg.az_width))
        n_el = int(round(180.0 / cfg.el_width))
        bins = [(i, j) for j in range(n_el) for i in range(n_az)]
    if jobs <= 1:
        return pl.class_features(mesh, cfg, bins)
    chunks = [bins[k::jobs] for k in range(jobs)]
    out = {}
    with ProcessPoolExecutor(jobs) as ex:
        for part in ex.map(_features_chunk, [(mesh_path, asdict(cfg), c) for c in chunks if c]):
            out.update(part)
    return {b: out[b] for b in bins}


def save_features(path, feats):
    rows = [np.concatenate([[i, j], f]) for (i, j), X in sorted(feats.items()) for f in X]
    np.save(path, np.array(rows, dtype=float))


def load_features(path):
    A = np.load(path)
    out = {}
    for row in A:
        out.setdefault((int(row[0]), int(row[1])), []).append(row[2:])
    return {k: np.array(v) for k, v in out.items()}


def cmd_train(args):
    conf = read_json_config(args.config) or {"version": 1}
    if conf.get("version") != 1:
        raise ConfigError("train config needs version 1")
    extra = set(conf) - {"version", "classifier", "keyframes"}
    if extra:
        raise ConfigError(f"unknown train fields: {sorted(extra)}")
    ccfg = dataclass_from(pl.ClassifierConfig, {"version": 1, **conf.get("classifier", {})}, "classifier")
    kconf = dict(az_step=9.0, el_step=9.0, distance=50.0, density=300)
    unknown = set(conf.get("keyframes", {})) - set(TRAIN_KEYFRAME_FIELDS)
    if unknown:
        raise ConfigError(f"unknown keyframe fields: {sorted(unknown)}")
    kconf.update(conf.get("keyframes", {}))
    for k in TRAIN_KEYFRAME_FIELDS:
        v = getattr(args, k)
        if v is not None:
            kconf[k] = v
    if args.class_width is not None:
        ccfg.az_width = ccfg.el_width = args.class_width
    if args.seed is not None:
        ccfg.seed = args.seed
    seed = ccfg.seed
    mesh = load_mesh(args.mesh)
    os.makedirs(args.out, exist_ok=True)
    K = pl.tracking_camera()
    if not args.no_keyframes:
        t0 = time.perf_counter()
        kfs = pl.KeyframeSet(mesh, K, kconf["az_step"], kconf["el_step"], kconf["distance"],
                             int(kconf["density"]), seed=seed)
        scene.save_keyframes(kfs.all(), os.path.join(args.out, "keyframes"), K)
        print(f"keyframes: {len(kfs)} written ({time.perf_counter() - t0:.1f} s)", file=sys.stderr)
    if not args.no_classifier:
        t0 = time.perf_counter()
        feats = class_features_parallel(args.mesh, mesh, ccfg, args.jobs)
        save_features(os.path.join(args.out, "features.npy"), feats)
        db = pl.train_classifier(mesh, ccfg, feats)
        db.save(os.path.join(args.out, "classes.json"))
        print(f"classifier: {len(db.classes)} classes ({time.perf_counter() - t0:.1f} s)", file=sys.stderr)
    args.seed = seed
    _manifest(args, [args.mesh], [args.config])
    return 0


# ---------------------------------------------------------------------------
# classify

def _db_config(db):
    c = db.meta.get("classifier")
    return pl.ClassifierConfig(**{k: v for k, v in c.items()}) if c else pl.ClassifierConfig(
        az_width=db.az_width, el_width=db.el_width, d=db.d)


def write_kfold(out_dir, stats):
    os.makedirs(out_dir, exist_ok=True)
    import csv

    with open(os.path.join(out_dir, "kfold_pmf_cdf.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["axis", "bin_distance", "pmf", "cdf"])
        for axis in ("azimuth", "elevation"):
            for k, (p, c) in enumerate(zip(stats[axis]["pmf"], stats[axis]["cdf"])):
                wr.writerow([axis, k, repr(float(p)), repr(float(c))])
    n = max(len(stats["azimuth"]["pmf"]), len(stats["elevation"]["pmf"]))

    def pad(v):
        return list(v) + [0.0] * (n - len(v))

    plots.bar_chart(os.path.join(out_dir, "kfold_pmf.svg"), [str(k) for k in range(n)],
                    {"azimuth": pad(stats["azimuth"]["pmf"]), "elevation": pad(stats["elevation"]["pmf"])},
                    "k-fold classification error", "bin distance", "fraction")


def cmd_classify(args):
    if args.kfold:
        conf = read_json_config(args.config)
        ccfg = dataclass_from(pl.ClassifierConfig, conf, "classifier") if conf else pl.ClassifierConfig()
        if args.seed is not None:
            ccfg.seed = args.seed
        if args.features:
            if not os.path.exists(args.features):
                raise UsageError(f"features not found: {args.features}")
            feats = load_features(args.features)
        else:
            feats = class_features_parallel(args.mesh, load_mesh(args.mesh), ccfg, args.jobs)
        stats = mixture.kfold_validate(feats, args.kfold, ccfg.az_width, ccfg.el_width, seed=ccfg.seed,
                                       n_max_components=ccfg.n_components)
        summary = {ax: {"exact": stats[ax]["exact"], "within1": stats[ax]["within1"]}
                   for ax in ("azimuth", "elevation")}
        print(json_dumps({"n": stats["n"], **summary}, indent=None))
        if args.out:
            write_kfold(args.out, stats)
            json_dump(stats, os.path.join(args.out, "kfold.json"))
            args.seed = ccfg.seed
            _manifest(args, [args.mesh, args.features], [args.config])
        return 0
    if not args.db:
        raise UsageError("classify needs --db (or --kfold)")
    if not os.path.exists(args.db):
        raise UsageError(f"database not found: {args.db}")
    db = mixture.ClassDatabase.load(args.db)
    n_max = int(db.meta.get("n_max", 10))
    if not args.masks:
        raise UsageError("no masks given")
    from .zernike import mask_feature

    for path in args.masks:
        if not os.path.exists(path):
            raise UsageError(f"mask not found: {path}")
        ranked = mixture.classify(db, mask_feature(read_pgm(path), n_max, db.d))
        top = [{"az_bin": c[0], "el_bin": c[1], "posterior": p} for c, p in ranked[: args.top]]
        print(json_dumps({"mask": path, "ranked": top}, indent=None))
    return 0


# ---------------------------------------------------------------------------
# mest-bench

def cmd_mest_bench(args):
    conf = read_json_config(args.config)
    if conf:
        conf = dict(conf)
        cam = conf.pop("camera", None)
        bcfg = dataclass_from(robust.BenchmarkConfig, conf, "benchmark")
        if cam is not None:
            from .camera import Intrinsics

            bcfg.camera = Intrinsics(**cam)
    else:
        bcfg = robust.BenchmarkConfig()
    if args.trials is not None:
        bcfg.trials = args.trials
    if args.seed is not None:
        bcfg.seed = args.seed
    os.makedirs(args.out, exist_ok=True)
    res = robust.mest_benchmark(bcfg, args.out)
    rows = []
    for frac, r in res.items():
        series_t, series_r = {}, {}
        for m, C in r["curves"].items():
            med = np.median(C, axis=0)
            it = np.arange(len(med))
            series_t[m] = (it, med[:, 0])
            series_r[m] = (it, med[:, 1])
            rows.append((frac, m, float(med[-1, 0]), float(med[-1, 1]), float(np.median(C[:, -1, 2]))))
        pct = int(round(frac * 100))
        plots.line_chart(os.path.join(args.out, f"mest_translation_{pct:02d}.svg"), series_t,
                         f"median normalized translation error, {pct}% outliers", "iteration", "error", logy=True)
        plots.line_chart(os.path.join(args.out, f"mest_rotation_{pct:02d}.svg"), series_r,
                         f"median normalized rotation error, {pct}% outliers", "iteration", "error", logy=True)
    import csv

    with open(os.path.join(args.out, "mest_summary.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["outlier_fraction", "method", "t_err_final_median", "r_err_final_median", "sigma_final_median"])
        for row in rows:
            wr.writerow([repr(row[0]), row[1], *(repr(v) for v in row[2:])])
    for row in rows:
        print(f"{row[0]:.2f} {row[1]:<18s} t {row[2]:.4f}  r {row[3]:.4f}  sigma {row[4]:.3f}")
    args.seed = bcfg.seed
    _manifest(args, [], [args.config])
    return 0


# ---------------------------------------------------------------------------
# track

def parse_blackout(text):
    """``"START:COUNT"`` frame indices (comma separated for several windows)."""
    out = set()
    if not text:
        return out
    for part in text.split(","):
        try:
            a, n = (int(x) for x in part.split(":"))
        except ValueError:
            raise UsageError(f"bad blackout window {part!r}, expected START:COUNT") from None
        out.update(range(a, a + n))
    return out


def cmd_track(args):
    tconf = read_json_config(args.trajectory)
    traj = scene.TrajectoryConfig.from_dict(tconf) if tconf else scene.TrajectoryConfig()
    if args.duration is not None:
        traj.duration_s = args.duration
    if args.seed is not None:
        traj.seed = args.seed
    pconf = read_json_config(args.config)
    cfg = pl.PipelineConfig.from_dict(pconf) if pconf else pl.PipelineConfig()
    mesh = load_mesh(args.mesh)
    K = pl.tracking_camera()
    kf_dir = args.keyframes or cfg.keyframe_db
    if kf_dir:
        if not os.path.exists(os.path.join(kf_dir, "index.json")):
            raise UsageError(f"no keyframe database in {kf_dir}")
        kfs_list, K = scene.load_keyframes(kf_dir)
        kfs = pl.KeyframeSet(mesh, K, keyframes=kfs_list)
    else:
        kfs = pl.KeyframeSet(mesh, K)
    db_path = args.classifier or cfg.class_db
    db = None
    ccfg = None
    if db_path:
        if not os.path.exists(db_path):
            raise UsageError(f"classifier database not found: {db_path}")
        db = mixture.ClassDatabase.load(db_path)
        ccfg = _db_config(db)
    cam = pl.SimulatedCamera(mesh, K, traj, blackout=parse_blackout(args.blackout))
    p = pl.Pipeline(kfs, K, cfg, classifier=db, classifier_config=ccfg)
    t0 = time.perf_counter()
    last = [t0]

    def progress(r):
        now = time.perf_counter()
        if args.verbose and now - last[0] > 5:
            last[0] = now
            e = r.errors or {}
            print(f"t={r.t:7.1f}s mode={r.mode:<9s} pos={e.get('position_frac', float('nan')):.4f} "
                  f"att={e.get('attitude_deg', float('nan')):.3f}", file=sys.stderr)

    p.run(cam.frames(), progress)
    wall = time.perf_counter() - t0
    os.makedirs(args.out, exist_ok=True)
    summary = pl.write_outputs(p.results, args.out, cfg.settle_time)
    ts = [r.t for r in p.results if r.errors]
    if ts:
        pos = [100 * r.errors["position_frac"] for r in p.results if r.errors]
        att = [r.errors["attitude_deg"] for r in p.results if r.errors]
        nees = [r.errors["nees"] for r in p.results if r.errors]
        plots.line_chart(os.path.join(args.out, "position_error.svg"), {"position": (ts, pos)},
                         "position error", "time [s]", "% of range", hlines=(5.0,))
        plots.line_chart(os.path.join(args.out, "attitude_error.svg"), {"attitude": (ts, att)},
                         "attitude error", "time [s]", "deg", hlines=(2.5,))
        plots.line_chart(os.path.join(args.out, "nees.svg"), {"NEES": (ts, nees)}, "normalized estimation error",
                         "time [s]", "NEES", logy=True, hlines=pl.NEES_BOUNDS_12)
        counts = [(r.t, r.counts.get("matches", 0), r.counts.get("inliers", 0)) for r in p.results]
        plots.line_chart(os.path.join(args.out, "matches.svg"),
                         {"matches": ([c[0] for c in counts], [c[1] for c in counts]),
                          "inliers": ([c[0] for c in counts], [c[2] for c in counts])},
                         "point matches and inliers", "time [s]", "count")
    ss = summary.get("steady_state", {})
    print(json_dumps({"frames": summary["frames"], "modes": summary["modes"], "accepted": summary["accepted"],
                      "steady_state": ss}, indent=None))
    print(f"wall time {wall:.1f} s", file=sys.stderr)
    args.seed = traj.seed
    _manifest(args, [args.mesh, kf_dir, db_path], [args.config, args.trajectory])
    return 0


# ---------------------------------------------------------------------------
# check

def cmd_check(args):
    perturb = {"gamma_scale": args.perturb_gamma} if args.perturb_gamma is not None else None
    results = checks.run_checks(args.only or None, perturb)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        json_dump([{k: v for k, v in asdict(r).items() if k != "seconds"} for r in results],
                  os.path.join(args.out, "checks.json"))
        _manifest(args, [], [])
    return 0 if ok else 1


# ---------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the seed in any config")
    common.add_argument("--out", default=None, help="output directory")
    common.add_argument("--config", default=None, help="JSON config with a version field")
    common.add_argument("--jobs", type=int, default=1, help="worker processes where supported")

    ap = argparse.ArgumentParser(prog="relnav", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="build keyframe and view-class databases")
    t.add_argument("--mesh", default=None, help="OBJ mesh (default: bundled target)")
    t.add_argument("--az-step", type=float, default=None)
    t.add_argument("--el-step", type=float, default=None)
    t.add_argument("--distance", type=float, default=None)
    t.add_argument("--density", type=int, default=None)
    t.add_argument("--class-width", type=float, default=None, help="classifier bin width, degrees")
    t.add_argument("--no-keyframes", action="store_true")
    t.add_argument("--no-classifier", action="store_true")
    t.set_defaults(func=cmd_train, out_default="train_out")

    c = sub.add_parser("classify", parents=[common], help="rank view classes for silhouettes")
    c.add_argument("masks", nargs="*", help="PGM silhouettes")
    c.add_argument("--db", default=None, help="classes.json from train")
    c.add_argument("--top", type=int, default=5)
    c.add_argument("--kfold", type=int, default=0, help="run k-fold cross validation instead")
    c.add_argument("--features", default=None, help="features.npy from train (k-fold mode)")
    c.add_argument("--mesh", default=None)
    c.set_defaults(func=cmd_classify, out_default=None)

    m = sub.add_parser("mest-bench", parents=[common], help="scale-estimation benchmark on cube scenes")
    m.add_argument("--trials", type=int, default=None)
    m.set_defaults(func=cmd_mest_bench, out_default="mest_out")

    k = sub.add_parser("track", parents=[common], help="run the tracking loop on a simulated trajectory")
    k.add_argument("--trajectory", default=None, help="TrajectoryConfig JSON")
    k.add_argument("--keyframes", default=None, help="keyframe directory from train")
    k.add_argument("--classifier", default=None, help="classes.json from train")
    k.add_argument("--mesh", default=None)
    k.add_argument("--duration", type=float, default=None)
    k.add_argument("--blackout", default=None, help="START:COUNT frame windows with no measurements")
    k.add_argument("-v", "--verbose", action="store_true")
    k.set_defaults(func=cmd_track, out_default="track_out")

    h = sub.add_parser("check", parents=[common], help="numerical oracle checks")
    h.add_argument("--only", action="append", default=None, help="run only the named check (repeatable)")
    h.add_argument("--perturb-gamma", type=float, default=None,
                   help="scale the process noise under test (the report must then fail)")
    h.set_defaults(func=cmd_check, out_default=None)
    return ap


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.out is None:
        args.out = args.out_default
    del args.out_default
    try:
        return args.func(args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        print(f"relnav {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except RelNavError as exc:
        print(f"relnav {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
