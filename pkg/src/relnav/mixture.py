"""Diagonal Gaussian mixtures, Figueiredo-Jain model selection and a
Bayesian view classifier with k-fold validation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import _jsonio
from .errors import (AllAnnihilated, Degenerate, DimensionMismatch,
                     InsufficientSamples)

DB_VERSION = 1
LOG2PI = np.log(2.0 * np.pi)


@dataclass
class GmmModel:
    """Mixture with diagonal covariances.

    ``weights`` is (K,), ``means`` and ``variances`` are (K, d).
    """

    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray
    info: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.variances = np.atleast_2d(np.asarray(self.variances, dtype=float))
        if self.means.shape != self.variances.shape or len(self.weights) != len(self.means):
            raise DimensionMismatch("weights, means and variances disagree in shape")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must sum to one")

    @property
    def d(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return len(self.weights)

    def component_logpdf(self, Y):
        """(n, K) matrix of per-component log densities."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.d:
            raise DimensionMismatch(f"feature has {Y.shape[1]} dims, model has {self.d}")
        return _diag_logpdf(Y, self.means, self.variances)

    def logpdf(self, Y):
        lp = logsumexp(self.component_logpdf(Y) + np.log(self.weights), axis=1)
        return lp[0] if np.ndim(Y) == 1 else lp

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        return self.means[comp] + rng.normal(size=(n, self.d)) * np.sqrt(self.variances[comp])

    def to_dict(self):
        return [{"alpha": float(a), "mu": m, "var": v}
                for a, m, v in zip(self.weights, self.means, self.variances)]

    @classmethod
    def from_dict(cls, comps):
        w = np.array([float(c["alpha"]) for c in comps])
        return cls(w / w.sum(), [c["mu"] for c in comps], [c["var"] for c in comps])


def _diag_logpdf(Y, means, variances):
    # -(1/2) * [d ln 2pi + sum ln var + sum (y - mu)^2 / var]
    iv = 1.0 / variances
    quad = (Y * Y) @ iv.T - 2.0 * Y @ (means * iv).T + np.sum(means * means * iv, axis=1)
    const = means.shape[1] * LOG2PI + np.sum(np.log(variances), axis=1)
    return -0.5 * (np.maximum(quad, 0.0) + const)


def gmm_logpdf(model: GmmModel, y):
    """Log mixture density at ``y`` (one point or a batch)."""
    return model.logpdf(y)


def variance_floor(X):
    v = X.var(axis=0)
    fill = 1e-8 * (v.mean() if v.mean() > 0 else 1.0)
    return np.where(v > 0, 1e-8 * v, fill)


def em_fit(data, n_components, seed=0, tol=1e-7, max_iter=500):
    """Plain EM with ``n_components`` components.

    Converges when the log-likelihood improves by less than
    ``tol * |loglik|``.  The log-likelihood trace is kept in
    ``model.info["loglik"]`` and checked for monotonicity.
    """
    X = np.asarray(data, dtype=float)
    n, d = X.shape
    K = int(n_components)
    if n <= 2 * K:
        raise InsufficientSamples(f"need more than {2 * K} samples, got {n}")
    rng = np.random.default_rng(seed)
    floor = variance_floor(X)
    means = X[rng.choice(n, K, replace=False)].copy()
    variances = np.tile(np.maximum(X.var(axis=0), floor), (K, 1))
    weights = np.full(K, 1.0 / K)
    trace = []
    for _ in range(max_iter):
        logp = _diag_logpdf(X, means, variances) + np.log(weights)
        norm = logsumexp(logp, axis=1)
        ll = float(norm.sum())
        if trace and ll < trace[-1] - 1e-9 * abs(trace[-1]):
            raise AssertionError("EM log-likelihood decreased")
        trace.append(ll)
        if len(trace) > 1 and ll - trace[-2] < tol * abs(ll):
            break
        W = np.exp(logp - norm[:, None])
        Nk = W.sum(axis=0)
        if np.any(Nk <= 0):
            raise Degenerate("a component lost all support")
        weights = Nk / n
        means = (W.T @ X) / Nk[:, None]
        variances = (W.T @ (X * X)) / Nk[:, None] - means**2
        variances = np.maximum(variances, floor)
        if np.any(np.all(variances <= floor, axis=1)):
            raise Degenerate("a component collapsed onto the variance floor")
    model = GmmModel(weights / weights.sum(), means, variances)
    model.info["loglik"] = trace
    return model


def mml_cost(loglik, weights, n_samples, n_params):
    """Minimum-message-length cost of a mixture (smaller is better)."""
    weights = np.asarray(weights, dtype=float)
    k = len(weights)
    N = n_params
    m = n_samples
    return (0.5 * N * np.sum(np.log(m * weights / 12.0))
            + 0.5 * k * np.log(m / 12.0) + 0.5 * k * (N + 1) - loglik)


def fj_fit(data, n_max_components=10, seed=0, tol=1e-5, max_iter=300, n_min_components=1,
           init=None, check_samples=True):
    """Unsupervised mixture fit with component annihilation.

    Starts from ``n_max_components`` components centred on random samples
    with the global variance, updates one component at a time (recomputing
    responsibilities after each) and removes components whose support
    drops below half their parameter count.  After each convergence the
    weakest component is forced out; the visited model with the lowest
    message-length cost is returned.

    Parameters
    ----------
    data : (n, d) array
    n_max_components : int
    seed : int or Generator
    init : (weights, means, variances), optional
        Explicit starting mixture instead of the random one.
    check_samples : bool
        Refuse data with ``n <= 2 N`` (``N = 2 d``).

    Returns
    -------
    GmmModel
        ``info`` carries ``cost``, ``initial_cost`` and the per-stage costs.
    """
    X = np.asarray(data, dtype=float)
    n, d = X.shape
    N = 2 * d
    if check_samples and n <= 2 * N:
        raise InsufficientSamples(f"need more than {2 * N} samples for d = {d}, got {n}")
    rng = np.random.default_rng(seed)
    floor = variance_floor(X)
    if init is None:
        K = int(n_max_components)
        means = X[rng.choice(n, K, replace=K > n)].copy()
        variances = np.tile(np.maximum(X.var(axis=0), floor), (K, 1))
        weights = np.full(K, 1.0 / K)
    else:
        weights, means, variances = (np.array(a, dtype=float) for a in init)
        weights = weights / weights.sum()
    X2 = X * X
    logN = _diag_logpdf(X, means, variances)

    def cost(w, lN):
        ll = float(logsumexp(lN + np.log(w), axis=1).sum())
        return mml_cost(ll, w, n, N), ll

    initial_cost, _ = cost(weights, logN)
    best = None
    stages = []
    while True:
        prev = np.inf
        for _ in range(max_iter):
            m = 0
            while m < len(weights):
                logp = logN + np.log(weights)
                W = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
                support = W[:, m].sum()
                weights[m] = max(0.0, support - 0.5 * N) / n
                total = weights.sum()
                if total <= 0.0:
                    raise AllAnnihilated("every component lost its support")
                weights = weights / total
                if weights[m] > 0.0:
                    w = W[:, m]
                    mu = w @ X / support
                    var = np.maximum(w @ X2 / support - mu * mu, floor)
                    means[m], variances[m] = mu, var
                    logN[:, m] = _diag_logpdf(X, mu[None], var[None])[:, 0]
                    m += 1
                else:
                    keep = np.arange(len(weights)) != m
                    weights, means, variances, logN = weights[keep], means[keep], variances[keep], logN[:, keep]
            c, ll = cost(weights, logN)
            converged = abs(prev - c) < tol * abs(prev) if np.isfinite(prev) else False
            prev = c
            if converged:
                break
        stages.append((len(weights), c))
        if best is None or c < best[0]:
            best = (c, ll, weights.copy(), means.copy(), variances.copy())
        if len(weights) <= n_min_components:
            break
        j = int(np.argmin(weights))
        keep = np.arange(len(weights)) != j
        weights, means, variances, logN = weights[keep], means[keep], variances[keep], logN[:, keep]
        weights = weights / weights.sum()
    c, ll, w, mu, var = best
    model = GmmModel(w, mu, var)
    model.info.update(cost=c, loglik=ll, initial_cost=initial_cost, stages=stages)
    return model


@dataclass
class ClassEntry:
    az_bin: int
    el_bin: int
    model: GmmModel
    prior: float

    @property
    def class_id(self):
        return (self.az_bin, self.el_bin)


@dataclass
class ClassDatabase:
    classes: list
    az_width: float
    el_width: float
    d: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.array([c.prior for c in self.classes])
        if len(p) and abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("class priors must sum to one")
        for c in self.classes:
            if c.model.d != self.d:
                raise DimensionMismatch("class model dimension differs from database d")

    @property
    def n_az(self):
        return int(round(360.0 / self.az_width))

    @property
    def n_el(self):
        return int(round(180.0 / self.el_width))

    def class_ids(self):
        return [c.class_id for c in self.classes]

    def log_likelihoods(self, Y):
        """(n, C) log p(y | C_m) for a batch of features."""
        Y = np.atleast_2d(np.asarray(Y, dtype=float))
        if Y.shape[1] != self.d:
            raise DimensionMismatch(f"feature has {Y.shape[1]} dims, database has {self.d}")
        return np.column_stack([c.model.logpdf(Y) for c in self.classes])

    def posteriors(self, Y):
        lp = self.log_likelihoods(Y) + np.log([c.prior for c in self.classes])
        return np.exp(lp - logsumexp(lp, axis=1, keepdims=True))

    def to_dict(self):
        return {"version": DB_VERSION, "d": self.d,
                "bin_widths": {"azimuth_deg": self.az_width, "elevation_deg": self.el_width},
                "meta": self.meta,
                "classes": [{"az_bin": c.az_bin, "el_bin": c.el_bin, "prior": c.prior,
                             "components": c.model.to_dict()} for c in self.classes]}

    @classmethod
    def from_dict(cls, obj):
        if obj.get("version") != DB_VERSION:
            raise ValueError(f"unsupported database version {obj.get('version')!r}")
        bw = obj["bin_widths"]
        classes = [ClassEntry(int(c["az_bin"]), int(c["el_bin"]), GmmModel.from_dict(c["components"]),
                              float(c["prior"])) for c in obj["classes"]]
        return cls(classes, float(bw["azimuth_deg"]), float(bw["elevation_deg"]), int(obj["d"]),
                   obj.get("meta", {}))

    def save(self, path):
        _jsonio.dump(self.to_dict(), path)

    @classmethod
    def load(cls, path):
        return cls.from_dict(_jsonio.load(path))


def classify(db: ClassDatabase, y):
    """Classes ranked by posterior, as ``[(class_id, posterior), ...]``.

    Ties keep the lower class index first.
    """
    post = db.posteriors(np.asarray(y, dtype=float)[None])[0]
    order = np.argsort(-post, kind="stable")
    ids = db.class_ids()
    return [(ids[i], float(post[i])) for i in order]


def train_database(features, az_width, el_width, n_max_components=10, seed=0, priors=None, method="fj"):
    """Fit one mixture per class.

    ``features`` maps ``(az_bin, el_bin)`` to an (n, d) array.  Classes are
    stored in sorted id order; a per-class seed is derived from ``seed``.
    """
    ids = sorted(features)
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    seeds = ss.spawn(len(ids))
    entries = []
    d = None
    for cid, ss in zip(ids, seeds):
        X = np.asarray(features[cid], dtype=float)
        d = X.shape[1] if d is None else d
        rng = np.random.default_rng(ss)
        if method == "fj":
            model = fj_fit(X, n_max_components, seed=rng)
        else:
            model = em_fit(X, n_max_components, seed=rng)
        prior = 1.0 / len(ids) if priors is None else priors[cid]
        entries.append(ClassEntry(cid[0], cid[1], model, prior))
    return ClassDatabase(entries, az_width, el_width, d)


def azimuth_distance(a, b, n_az):
    """Shortest bin distance with azimuth identified modulo 180 degrees."""
    half = n_az // 2
    delta = np.abs(np.asarray(a) - np.asarray(b)) % half
    return np.minimum(delta, half - delta)


def elevation_distance(a, b):
    return np.abs(np.asarray(a) - np.asarray(b))


def confusion_stats(true_ids, pred_ids, n_az, n_el):
    """Exact and within-one-bin rates plus distance PMF/CDF per axis."""
    t = np.asarray(true_ids)
    p = np.asarray(pred_ids)
    daz = azimuth_distance(t[:, 0], p[:, 0], n_az)
    delev = elevation_distance(t[:, 1], p[:, 1])
    out = {"n": int(len(t))}
    for name, dist, size in (("azimuth", daz, n_az // 2 // 2 + 1), ("elevation", delev, n_el)):
        pmf = np.bincount(dist, minlength=size) / len(dist)
        out[name] = {"exact": float(pmf[0]), "within1": float(pmf[:2].sum()),
                     "pmf": pmf.tolist(), "cdf": np.cumsum(pmf).tolist()}
    # azimuth resolution degrades towards the poles, so report it per true elevation band
    out["by_elevation"] = [
        {"el_bin": int(j), "n": int(s.sum()),
         "azimuth_exact": int((daz[s] == 0).sum()), "azimuth_within1": int((daz[s] <= 1).sum()),
         "elevation_exact": int((delev[s] == 0).sum()), "elevation_within1": int((delev[s] <= 1).sum())}
        for j in np.unique(t[:, 1]) for s in [t[:, 1] == j]]
    return out


def kfold_validate(features, k, az_width, el_width, seed=0, n_max_components=10,
                   method="fj", classifier=None):
    """k-fold cross validation of the view classifier.

    Each class's samples are shuffled and dealt into ``k`` folds; fold ``f``
    is tested against a database trained on the other ``k - 1``.
    ``classifier(train_features, test_matrix) -> predicted ids`` can replace
    the mixture classifier (used for sanity baselines).
    """
    ids = sorted(features)
    for cid in ids:
        if len(features[cid]) < k:
            raise InsufficientSamples(f"class {cid} has {len(features[cid])} samples, need {k}")
    rng = np.random.default_rng(seed)
    folds = {cid: np.array_split(rng.permutation(len(features[cid])), k) for cid in ids}
    true_all, pred_all = [], []
    fold_seeds = np.random.SeedSequence(seed).spawn(k)
    for f in range(k):
        train = {}
        test_x, test_y = [], []
        for cid in ids:
            X = np.asarray(features[cid])
            mask = np.ones(len(X), bool)
            mask[folds[cid][f]] = False
            train[cid] = X[mask]
            test_x.append(X[~mask])
            test_y += [cid] * int((~mask).sum())
        T = np.vstack(test_x)
        if classifier is None:
            db = train_database(train, az_width, el_width, n_max_components,
                                seed=fold_seeds[f], method=method)
            post = db.posteriors(T)
            best = np.argmax(post, axis=1)
            cls = db.class_ids()
            pred = [cls[i] for i in best]
        else:
            pred = classifier(train, T)
        true_all += test_y
        pred_all += list(pred)
    n_az = int(round(360.0 / az_width))
    n_el = int(round(180.0 / el_width))
    return confusion_stats(true_all, pred_all, n_az, n_el)
