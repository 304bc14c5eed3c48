import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tcl.errors import DegenerateFeaturesWarning, TooFewSamples
from tcl.memory import (
    EPS_COV,
    PSEUDO,
    ClassGaussianMixture,
    MemoryStore,
    class_prototypes,
    fit_class_gmm,
    l2_normalize,
    load_memories,
    sample_pseudo_features,
    save_memories,
)


def assert_em_monotone(gmm):
    ll = np.asarray(gmm.log_likelihood)
    assert len(ll) >= 1
    assert np.all(np.diff(ll) >= -1e-9 * np.abs(ll[:-1]))


def test_k1_closed_form():
    x = np.random.default_rng(0).normal(2.0, 0.7, size=(50, 5))
    gmm = fit_class_gmm(x, K=1, seed=3)
    np.testing.assert_array_equal(gmm.means[0], x.mean(axis=0))
    np.testing.assert_array_equal(gmm.variances[0], np.maximum(x.var(axis=0), EPS_COV))
    assert gmm.weights.tolist() == [1.0]


def test_k1_recovers_standard_normal():
    x = np.random.default_rng(11).standard_normal((2000, 8))
    gmm = fit_class_gmm(x, K=1, seed=0)
    assert np.all(np.abs(gmm.means[0]) < 0.1)


def test_too_few_samples():
    with pytest.raises(TooFewSamples):
        fit_class_gmm(np.zeros((2, 3)), K=3)


def test_degenerate_features_warn_and_floor():
    with pytest.warns(DegenerateFeaturesWarning):
        gmm = fit_class_gmm(np.ones((10, 4)), K=2, seed=0)
    assert np.all(gmm.variances >= EPS_COV)
    assert_em_monotone(gmm)


def test_em_separates_two_clusters():
    rng = np.random.default_rng(5)
    a = rng.normal(-3.0, 0.5, size=(300, 2))
    b = rng.normal(4.0, 0.3, size=(100, 2))
    gmm = fit_class_gmm(np.vstack([a, b]), K=2, seed=1)
    assert_em_monotone(gmm)
    order = np.argsort(gmm.means[:, 0])
    np.testing.assert_allclose(gmm.means[order], [[-3, -3], [4, 4]], atol=0.1)
    np.testing.assert_allclose(gmm.weights[order], [0.75, 0.25], atol=1e-6)
    np.testing.assert_allclose(np.sqrt(gmm.variances[order]), [[0.5, 0.5], [0.3, 0.3]], atol=0.06)


def test_fit_deterministic_given_seed():
    x = np.random.default_rng(2).normal(size=(200, 3))
    a = fit_class_gmm(x, K=3, seed=9)
    b = fit_class_gmm(x, K=3, seed=9)
    assert a == b
    assert a.log_likelihood == b.log_likelihood


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(5, 40), st.integers(1, 4)),
              elements=st.floats(-5, 5, allow_nan=False)),
       st.integers(1, 4), st.integers(0, 2**16))
def test_em_monotone_property(x, k, seed):
    k = min(k, len(x))
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFeaturesWarning)
        gmm = fit_class_gmm(x, K=k, seed=seed)
    assert_em_monotone(gmm)
    assert abs(gmm.weights.sum() - 1) <= 1e-9
    assert np.all(gmm.variances >= EPS_COV)


def test_sample_mean_standard_error():
    rng = np.random.default_rng(3)
    gmm = fit_class_gmm(rng.normal(1.0, 2.0, size=(400, 6)), K=1)
    n = 10_000
    batch = sample_pseudo_features(gmm, n, seed=4)
    bound = 3 * np.sqrt(gmm.variances[0]) / np.sqrt(n)
    assert np.all(np.abs(batch.features.mean(axis=0) - gmm.means[0]) <= bound)
    assert np.all(batch.origin == PSEUDO)
    assert np.all(batch.labels == gmm.class_id)


def test_sample_near_degenerate():
    mu = np.array([[0.3, -1.2, 2.0]])
    gmm = ClassGaussianMixture(7, "pretrained", [1.0], mu, np.full((1, 3), EPS_COV))
    z = sample_pseudo_features(gmm, 5, seed=0).features
    assert np.all(np.abs(z - mu) <= 6 * np.sqrt(EPS_COV))


def test_sample_deterministic():
    gmm = ClassGaussianMixture(0, "pretrained", [0.4, 0.6], [[0, 0], [5, 5]], [[1, 1], [2, 2]])
    a = sample_pseudo_features(gmm, 50, seed=12)
    b = sample_pseudo_features(gmm, 50, seed=12)
    np.testing.assert_array_equal(a.features, b.features)


def test_adapted_samples_unit_norm():
    x = l2_normalize(np.random.default_rng(1).normal([3, 0, 0], 0.2, size=(100, 3)))
    gmm = fit_class_gmm(x, K=2, seed=0, space_tag="adapted", class_id=4)
    z = sample_pseudo_features(gmm, 200, seed=1).features
    np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-12)


def test_prototypes():
    x = np.random.default_rng(0).normal(size=(60, 2))
    assert len(class_prototypes(fit_class_gmm(x, K=1))) == 1
    gmm = fit_class_gmm(x, K=3, seed=0)
    protos = class_prototypes(gmm)
    assert len(protos) == 3
    for i, (mu, var) in enumerate(protos):
        np.testing.assert_array_equal(mu, gmm.means[i])
        np.testing.assert_array_equal(var, gmm.variances[i])


def test_prototypes_depend_on_space():
    rng = np.random.default_rng(8)
    raw = rng.normal(0.5, 1.0, size=(300, 4))
    w_pre, w_ada = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    pre = fit_class_gmm(raw @ w_pre, K=1, space_tag="pretrained")
    ada = fit_class_gmm(raw @ w_ada, K=1, space_tag="adapted")
    assert pre.space_tag != ada.space_tag
    assert not np.allclose(pre.means, ada.means)


def test_moment_consistency():
    mu = np.linspace(1.0, 3.0, 8)
    var = np.linspace(0.5, 2.0, 8)
    gmm = ClassGaussianMixture(0, "pretrained", [1.0], mu[None], var[None])
    z = sample_pseudo_features(gmm, 100_000, seed=21).features
    np.testing.assert_allclose(z.mean(axis=0), mu, rtol=0.01)
    np.testing.assert_allclose(z.var(axis=0), var, rtol=0.01)


def test_replay_fidelity():
    mu = np.random.default_rng(4).normal(size=8)
    gmm = ClassGaussianMixture(0, "pretrained", [1.0], mu[None], np.full((1, 8), 0.25))
    refit = fit_class_gmm(sample_pseudo_features(gmm, 100_000, seed=5).features, K=1)
    assert np.linalg.norm(refit.means[0] - mu) < 1e-2


def test_invalid_mixture_rejected():
    with pytest.raises(ValueError):
        ClassGaussianMixture(0, "pretrained", [0.5, 0.4], [[0], [1]], [[1], [1]])
    with pytest.raises(ValueError):
        ClassGaussianMixture(0, "pretrained", [1.0], [[0]], [[0.0]])
    with pytest.raises(ValueError):
        ClassGaussianMixture(0, "latent", [1.0], [[0]], [[1.0]])


def test_store_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pre = MemoryStore("pretrained", [fit_class_gmm(rng.normal(size=(30, 3)), K=2, seed=0, class_id=c)
                                     for c in range(3)])
    ada = MemoryStore("adapted", [fit_class_gmm(rng.normal(size=(30, 3)), K=1, class_id=c,
                                                space_tag="adapted") for c in range(3)])
    path = tmp_path / "memory" / "task_1.json"
    save_memories(path, {"pretrained": pre, "adapted": ada}, 1)
    back = load_memories(path)
    for tag, store in (("pretrained", pre), ("adapted", ada)):
        assert back[tag].class_ids() == store.class_ids()
        for c in store.class_ids():
            assert back[tag][c] == store[c]
