import numpy as np
import pytest
from scipy.stats import multivariate_normal

from relnav import mixture as mx
from relnav.errors import AllAnnihilated, DimensionMismatch, InsufficientSamples


def single(mu, var):
    return mx.GmmModel([1.0], [mu], [var])


def test_logpdf_examples():
    d = 5
    m = single(np.zeros(d), np.ones(d))
    assert mx.gmm_logpdf(m, np.zeros(d)) == pytest.approx(-d / 2 * np.log(2 * np.pi))
    two = mx.GmmModel([0.5, 0.5], [np.ones(d)] * 2, [np.full(d, 2.0)] * 2)
    one = single(np.ones(d), np.full(d, 2.0))
    y = np.arange(d, dtype=float)
    assert mx.gmm_logpdf(two, y) == pytest.approx(mx.gmm_logpdf(one, y), rel=1e-14)
    with pytest.raises(DimensionMismatch):
        mx.gmm_logpdf(m, np.zeros(d + 1))


def test_logpdf_direct_oracle():
    rng = np.random.default_rng(0)
    d, K = 4, 3
    w = rng.dirichlet(np.ones(K))
    mu = rng.normal(size=(K, d))
    var = rng.uniform(0.2, 2.0, size=(K, d))
    m = mx.GmmModel(w, mu, var)
    for _ in range(20):
        y = rng.normal(size=d)
        ref = np.log(sum(w[k] * multivariate_normal(mu[k], np.diag(var[k])).pdf(y) for k in range(K)))
        assert mx.gmm_logpdf(m, y) == pytest.approx(ref, rel=1e-12)


def test_logsumexp_stability():
    m = mx.GmmModel([0.5, 0.5], [[0.0], [1.0]], [[1e-6], [1e-6]])
    v = mx.gmm_logpdf(m, [1.5])  # exponents about -1e5 .. -1e6
    assert np.isfinite(v) and v < -1e4
    v = mx.gmm_logpdf(single([0.0], [1.0]), [1414.0])
    assert np.isfinite(v) and v < -9.9e5


def test_em_single_gaussian():
    rng = np.random.default_rng(1)
    n, d = 4000, 3
    X = rng.normal(loc=[1, -2, 0.5], scale=[1.0, 0.5, 2.0], size=(n, d))
    m = mx.em_fit(X, 1, seed=0)
    assert np.all(np.abs(m.means[0] - [1, -2, 0.5]) < 3 * np.array([1.0, 0.5, 2.0]) / np.sqrt(n))


def test_em_two_clusters_and_monotone():
    rng = np.random.default_rng(2)
    X = np.vstack([rng.normal(0, 1, (1000, 2)), rng.normal([10, 0], 1, (1000, 2))])
    m = mx.em_fit(X, 2, seed=3)
    assert np.all(np.abs(m.weights - 0.5) < 0.05)
    ll = m.info["loglik"]
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(ll, ll[1:]))
    R = rng.normal(size=(300, 4))
    ll = mx.em_fit(R, 3, seed=4).info["loglik"]
    assert all(b >= a - 1e-9 * abs(a) for a, b in zip(ll, ll[1:]))


def three_blobs(rng, n=200, d=2, sep=8.0):
    centers = np.zeros((3, d))
    centers[1, 0] = centers[2, 1] = sep
    return np.vstack([rng.normal(c, 1.0, (n, d)) for c in centers])


def test_fj_recovers_three_components():
    hits = 0
    for trial in range(100):
        rng = np.random.default_rng(1000 + trial)
        m = mx.fj_fit(three_blobs(rng, n=300, d=10, sep=10.0), 10, seed=trial)
        hits += m.n_components == 3
    assert hits >= 95


def test_fj_cost_descends_and_one_component_is_em():
    rng = np.random.default_rng(5)
    X = three_blobs(rng)
    m = mx.fj_fit(X, 10, seed=0)
    assert m.info["cost"] <= m.info["initial_cost"]
    assert np.all(m.weights > 0) and m.weights.sum() == pytest.approx(1.0)
    one = mx.fj_fit(X, 1, seed=0)
    em = mx.em_fit(X, 1, seed=0)
    np.testing.assert_allclose(one.means, em.means, rtol=1e-10)
    np.testing.assert_allclose(one.variances, em.variances, rtol=1e-8)


def test_fj_cost_matches_formula():
    rng = np.random.default_rng(6)
    X = three_blobs(rng, 100)
    m = mx.fj_fit(X, 6, seed=1)
    n, d = X.shape
    N = 2 * d
    ll = m.logpdf(X).sum()
    k = m.n_components
    ref = N / 2 * np.sum(np.log(n * m.weights / 12)) + k / 2 * np.log(n / 12) + k * (N + 1) / 2 - ll
    assert m.info["cost"] == pytest.approx(ref, rel=1e-9)


def test_fj_planted_zero_support_component_is_removed():
    # one component far from all data receives no responsibility and dies on
    # its first update; max_iter=1 keeps the rest of the procedure out of the way
    rng = np.random.default_rng(7)
    X = rng.normal(size=(400, 2))
    init = ([0.5, 0.5], [[0.0, 0.0], [50.0, 50.0]], [[1.0, 1.0], [0.1, 0.1]])
    m = mx.fj_fit(X, 2, init=init)
    assert m.n_components == 1
    assert m.info["stages"][0][0] == 1


def test_fj_errors():
    rng = np.random.default_rng(8)
    with pytest.raises(InsufficientSamples):
        mx.fj_fit(rng.normal(size=(20, 5)), 3)
    # fewer samples than half a component's parameter count: nothing survives
    X = rng.normal(size=(4, 5))
    with pytest.raises(AllAnnihilated):
        mx.fj_fit(X, 3, seed=0, check_samples=False)


def test_seeded_determinism():
    rng = np.random.default_rng(9)
    X = three_blobs(rng)
    a = mx.fj_fit(X, 8, seed=11)
    b = mx.fj_fit(X, 8, seed=11)
    assert np.array_equal(a.means, b.means) and np.array_equal(a.weights, b.weights)


def make_db(models, priors=None):
    priors = priors or [1.0 / len(models)] * len(models)
    entries = [mx.ClassEntry(i, 0, m, p) for i, (m, p) in enumerate(zip(models, priors))]
    return mx.ClassDatabase(entries, 10.0, 10.0, models[0].d)


def test_classify_examples():
    m1, m2 = single([0, 0], [1, 1]), single([3, 0], [1, 1])
    ranked = mx.classify(make_db([m1, m2]), [0, 0])
    assert ranked[0][0] == (0, 0) and ranked[0][1] > 0.5
    same = make_db([m1, m1], [0.9, 0.1])
    post = [p for _, p in mx.classify(same, [1.0, 2.0])]
    np.testing.assert_allclose(post, [0.9, 0.1], rtol=1e-12)
    tie = make_db([m1, m1])
    assert [c for c, _ in mx.classify(tie, [0, 0])] == [(0, 0), (1, 0)]


def test_classify_nearest_mean_and_normalization():
    rng = np.random.default_rng(10)
    mus = rng.normal(size=(12, 3)) * 3
    db = make_db([single(mu, [1.0, 1.0, 1.0]) for mu in mus])
    for _ in range(20):
        y = rng.normal(size=3) * 3
        ranked = mx.classify(db, y)
        assert abs(sum(p for _, p in ranked) - 1) < 1e-12
        near = np.argsort(np.linalg.norm(mus - y, axis=1))
        assert [c[0] for c, _ in ranked] == list(near)
    with pytest.raises(DimensionMismatch):
        mx.classify(db, np.zeros(4))


def test_database_json_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    feats = {(a, e): rng.normal(loc=a, size=(40, 3)) for a in range(3) for e in range(2)}
    db = mx.train_database(feats, 10.0, 10.0, n_max_components=3, seed=0)
    p = tmp_path / "db.json"
    db.save(p)
    back = mx.ClassDatabase.load(p)
    assert back.class_ids() == db.class_ids()
    for a, b in zip(db.classes, back.classes):
        assert np.array_equal(a.model.means, b.model.means)
        assert np.array_equal(a.model.variances, b.model.variances)
        assert a.prior == b.prior
    text = p.read_text()
    assert '"version": 1' in text and '"bin_widths"' in text and '"alpha"' in text


def test_azimuth_distance():
    assert mx.azimuth_distance(0, 18, 36) == 0
    assert mx.azimuth_distance(0, 17, 36) == 1
    assert mx.azimuth_distance(35, 0, 36) == 1
    assert mx.azimuth_distance(0, 9, 36) == 9


def test_kfold_oracle_and_random_classifiers():
    rng = np.random.default_rng(12)
    feats = {(a, 0): rng.normal(size=(10, 2)) for a in range(36)}

    def truth(train, T):
        ids = sorted(train)
        return [ids[i // 1] for i in range(len(T))]

    # exact oracle: test stack is ordered by class, one sample per class per fold
    stats = mx.kfold_validate(feats, 10, 10.0, 10.0, classifier=truth)
    assert stats["azimuth"]["exact"] == 1.0 and stats["elevation"]["exact"] == 1.0

    def uniform(train, T):
        return [(int(rng.integers(36)), 0) for _ in range(len(T))]

    big = {(a, 0): np.zeros((200, 1)) for a in range(36)}
    stats = mx.kfold_validate(big, 10, 10.0, 10.0, classifier=uniform)
    se = np.sqrt((1 / 18) * (17 / 18) / stats["n"])
    assert abs(stats["azimuth"]["exact"] - 1 / 18) < 4 * se
    assert stats["azimuth"]["cdf"][-1] == pytest.approx(1.0)


def test_kfold_requires_k_samples():
    with pytest.raises(InsufficientSamples):
        mx.kfold_validate({(0, 0): np.zeros((3, 2))}, 10, 10.0, 10.0)
