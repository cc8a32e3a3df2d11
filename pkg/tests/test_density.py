import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import multivariate_normal

from gazeintent.density import (
    REG,
    GmmClassifier,
    GmmModel,
    InsufficientData,
    NoEvidence,
    bic,
    em_fit,
    gmm_classify,
    select_k,
)


def scipy_log_pdf(model, x):
    # independent density oracle
    dens = sum(w * multivariate_normal(m, c).pdf(x) for w, m, c in zip(model.weights, model.means, model.covariances))
    return np.log(dens)


def two_clusters(n=2000, seed=0):
    rng = np.random.default_rng(seed)
    a = rng.normal([0.2, 0.5], 0.05, size=(n // 2, 2))
    b = rng.normal([0.8, 0.5], 0.05, size=(n - n // 2, 2))
    return np.vstack([a, b])


def test_single_component_is_closed_form():
    x = np.random.default_rng(1).normal([3.0, -1.0], [2.0, 0.5], size=(500, 2))
    m = em_fit(x, 1)
    np.testing.assert_allclose(m.means[0], x.mean(0), atol=1e-9)
    np.testing.assert_allclose(m.covariances[0], np.cov(x.T, bias=True), atol=1e-9)
    assert m.weights.tolist() == [1.0]


def test_two_clusters_are_recovered():
    m = em_fit(two_clusters(), 2, seed=0)
    means = m.means[np.argsort(m.means[:, 0])]
    np.testing.assert_allclose(means, [[0.2, 0.5], [0.8, 0.5]], atol=0.02)


def test_degenerate_covariance_is_floored():
    x = np.column_stack([np.linspace(0, 1, 50), np.full(50, 0.3)])
    m = em_fit(x, 1)
    assert np.linalg.eigvalsh(m.covariances[0]).min() == pytest.approx(REG, rel=1e-6)
    assert m.covariances[0, 0, 0] == pytest.approx(np.var(x[:, 0]), rel=1e-9)


def test_model_invariants():
    m = em_fit(two_clusters(), 3, seed=2)
    assert abs(m.weights.sum() - 1.0) < 1e-12
    for c in m.covariances:
        assert np.allclose(c, c.T) and np.linalg.eigvalsh(c).min() >= 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 5))
def test_log_likelihood_never_decreases(seed, k):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(k, 300))
    x = rng.normal(size=(n, 2)) * rng.uniform(0.01, 3.0, size=2) + rng.integers(0, 3, size=(n, 1))
    m = em_fit(x, k, seed=seed)
    assert np.all(np.diff(m.history) >= -1e-9)


def test_too_few_points():
    with pytest.raises(InsufficientData):
        em_fit(np.zeros((2, 2)), 3)
    with pytest.raises(ValueError):
        em_fit(np.array([[0.0, np.nan], [1.0, 1.0]]), 1)


def test_log_pdf_matches_scipy():
    x = two_clusters(400, seed=3)
    m = em_fit(x, 3, seed=1)
    np.testing.assert_allclose(m.log_pdf(x), scipy_log_pdf(m, x), rtol=1e-10)


def test_density_integrates_to_one():
    m = em_fit(two_clusters(), 2, seed=0)
    g = np.linspace(-0.5, 1.5, 801)
    xx, yy = np.meshgrid(g, g)
    dens = np.exp(m.log_pdf(np.column_stack([xx.ravel(), yy.ravel()])))
    assert abs(dens.sum() * (g[1] - g[0]) ** 2 - 1.0) < 1e-3


def test_bic_formula():
    x = np.random.default_rng(5).normal(size=(100, 2))
    m = em_fit(x, 1)
    loglik = float(np.sum(scipy_log_pdf(m, x)))
    assert m.n_params == 5
    assert bic(m, x) == pytest.approx(5 * np.log(100) - 2 * loglik, abs=1e-9)
    m3 = em_fit(x, 3, seed=0)
    assert m3.n_params == 17
    assert bic(m3, x) - bic(m, x) == pytest.approx(
        12 * np.log(100) - 2 * (np.sum(scipy_log_pdf(m3, x)) - loglik), abs=1e-8
    )


def test_equal_likelihood_prefers_smaller_k():
    x = np.random.default_rng(6).normal(size=(50, 2))
    m1 = em_fit(x, 1)
    # a two-component model with identical halves has the same likelihood
    m2 = GmmModel(np.array([0.5, 0.5]), np.repeat(m1.means, 2, 0), np.repeat(m1.covariances, 2, 0))
    assert m2.score(x) == pytest.approx(m1.score(x), abs=1e-9)
    assert bic(m1, x) < bic(m2, x)


def test_select_k_on_one_gaussian():
    x = np.random.default_rng(7).normal([0.5, 0.5], [0.1, 0.05], size=(1000, 2))
    k, _ = select_k(x, seeds_per_k=2)
    assert k == 1


def test_select_k_skips_k_above_n():
    x = np.random.default_rng(8).normal(size=(8, 2))
    k, m = select_k(x, range(1, 12), seeds_per_k=1)
    assert 1 <= k <= 8 and m.k == k


def test_classify_samples_from_one_model():
    rng = np.random.default_rng(9)
    insp = em_fit(two_clusters(seed=1), 2, seed=0)
    manip = em_fit(rng.normal([0.5, 0.2], 0.1, size=(1000, 2)), 1)
    assert gmm_classify(insp.sample(200, rng), insp, manip) == "inspection"
    assert gmm_classify(manip.sample(200, rng), insp, manip) == "manipulation"


def test_tie_goes_to_inspection():
    m = em_fit(two_clusters(), 2, seed=0)
    assert gmm_classify(np.array([[0.5, 0.5]]), m, m) == "inspection"


def test_single_point_follows_the_denser_model():
    narrow = GmmModel(np.array([1.0]), np.array([[0.0, 0.0]]), np.eye(2)[None] * 0.01)
    wide = GmmModel(np.array([1.0]), np.array([[0.0, 0.0]]), np.eye(2)[None] * 1.0)
    # density at the mean differs by a factor 100
    assert gmm_classify(np.zeros((1, 2)), wide, narrow) == "manipulation"


def test_no_points_is_no_evidence():
    m = em_fit(two_clusters(), 1)
    with pytest.raises(NoEvidence):
        gmm_classify(np.zeros((0, 2)), m, m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_classification_ignores_point_order(seed):
    rng = np.random.default_rng(seed)
    a = em_fit(two_clusters(300, seed=2), 2)
    b = em_fit(rng.normal([0.5, 0.5], 0.2, size=(300, 2)), 1)
    pts = rng.uniform(0, 1, size=(int(rng.integers(1, 40)), 2))
    assert gmm_classify(pts, a, b) == gmm_classify(rng.permutation(pts), a, b)


def test_classifier_round_trip_and_no_evidence_default():
    rng = np.random.default_rng(10)
    sets = [rng.normal([0.3, 0.5], 0.05, size=(30, 2)) for _ in range(10)]
    sets += [rng.normal([0.7, 0.5], 0.05, size=(30, 2)) for _ in range(10)]
    labels = [0] * 10 + [1] * 10
    clf = GmmClassifier(k_range=range(1, 4), seeds_per_k=2).fit(sets, labels)
    assert clf.predict(sets).tolist() == labels
    back = GmmClassifier.from_json(clf.to_json())
    for intent in clf.models:
        assert np.array_equal(back.models[intent].covariances, clf.models[intent].covariances)
    assert back.predict([np.zeros((0, 2))]).tolist() == [0] and back.no_evidence == 1
