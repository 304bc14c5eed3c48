import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment, linprog

from tcl.errors import DimensionMismatch, DuplicateClassInMatrix, NonpositiveTemperature, SpaceMismatch
from tcl.memory import ClassGaussianMixture, sample_pseudo_features
from tcl.relation import (
    RelationMatrices,
    component_costs,
    expand_matrix,
    gaussian_w2,
    load_relation,
    median_temperature,
    mixture_w2,
    save_relation,
    solve_transport,
    weight_matrix,
)


def random_gmm(rng, k, d, class_id=0, space="pretrained"):
    w = rng.dirichlet(np.ones(k))
    return ClassGaussianMixture(class_id, space, w, rng.normal(0, 2, size=(k, d)),
                                rng.uniform(0.1, 3.0, size=(k, d)))


def vertex_enumeration_ot(a, b, cost):
    """Min cost over every vertex of the transport polytope.

    A vertex is the unique plan supported on a spanning tree of the
    row/column bipartite graph (m + n - 1 cells) whose entries are >= 0.
    """
    m, n = cost.shape
    cells = list(itertools.product(range(m), range(n)))
    best = np.inf
    for support in itertools.combinations(cells, m + n - 1):
        A = np.zeros((m + n, m + n - 1))
        for k, (i, j) in enumerate(support):
            A[i, k] = 1
            A[m + j, k] = 1
        if np.linalg.matrix_rank(A) < m + n - 1:
            continue
        x, *_ = np.linalg.lstsq(A, np.concatenate([a, b]), rcond=None)
        if np.any(x < -1e-12) or not np.allclose(A @ x, np.concatenate([a, b]), atol=1e-12):
            continue
        best = min(best, sum(xk * cost[c] for xk, c in zip(x, support)))
    return best


def two_by_two_oracle(a, b, cost):
    # the plan has one free entry p11 in [max(0, a1 - b2), min(a1, b1)]
    vals = []
    for p11 in (max(0.0, a[0] - b[1]), min(a[0], b[0])):
        plan = np.array([[p11, a[0] - p11], [b[0] - p11, a[1] - b[0] + p11]])
        vals.append(np.sum(plan * cost))
    return min(vals)


# --- gaussian_w2 ----------------------------------------------------------

def test_gaussian_w2_identity():
    assert gaussian_w2([1.0, 2.0], [0.5, 3.0], [1.0, 2.0], [0.5, 3.0]) == 0.0


def test_gaussian_w2_mean_shift():
    assert gaussian_w2([0.0], [1.0], [3.0], [1.0]) == 3.0


def test_gaussian_w2_scale():
    assert gaussian_w2([0.0], [1.0], [0.0], [4.0]) == 1.0


def test_gaussian_w2_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        gaussian_w2([0.0], [1.0], [0.0, 1.0], [1.0, 1.0])


# --- transport ------------------------------------------------------------

def test_solve_transport_marginals_and_optimality():
    rng = np.random.default_rng(0)
    for m, n in [(1, 1), (2, 3), (3, 3), (4, 2), (5, 5)]:
        a, b = rng.dirichlet(np.ones(m)), rng.dirichlet(np.ones(n))
        cost = rng.uniform(0, 10, size=(m, n))
        plan, total = solve_transport(a, b, cost)
        np.testing.assert_allclose(plan.sum(1), a, atol=1e-12)
        np.testing.assert_allclose(plan.sum(0), b, atol=1e-12)
        lp = linprog(cost.ravel(), A_eq=np.vstack([np.kron(np.eye(m), np.ones(n)),
                                                   np.kron(np.ones(m), np.eye(n))]),
                     b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
        assert total == pytest.approx(lp.fun, abs=1e-7)


@pytest.mark.parametrize("seed", range(10))
def test_solve_transport_matches_vertex_enumeration(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.dirichlet(np.ones(3)), rng.dirichlet(np.ones(3))
    cost = rng.uniform(0, 5, size=(3, 3))
    _, total = solve_transport(a, b, cost)
    assert total == pytest.approx(vertex_enumeration_ot(a, b, cost), abs=1e-12)


def test_solve_transport_degenerate_marginals():
    # equal uniform marginals are maximally degenerate for the NW-corner start
    a = b = np.full(4, 0.25)
    cost = np.array([[4, 1, 3, 2], [1, 4, 2, 3], [3, 2, 4, 1], [2, 3, 1, 4]], float)
    plan, total = solve_transport(a, b, cost)
    assert total == pytest.approx(0.25 * 4)
    assert total == pytest.approx(vertex_enumeration_ot(a, b, cost), abs=1e-12)


# --- mixture_w2 -----------------------------------------------------------

def test_mixture_w2_k1_equals_gaussian():
    rng = np.random.default_rng(1)
    a, b = random_gmm(rng, 1, 4), random_gmm(rng, 1, 4)
    assert mixture_w2(a, b) == gaussian_w2(a.means[0], a.variances[0], b.means[0], b.variances[0])


def test_mixture_w2_self_zero():
    g = random_gmm(np.random.default_rng(2), 3, 5)
    assert mixture_w2(g, g) == 0.0


def test_mixture_w2_half_half_two_components():
    rng = np.random.default_rng(3)
    a = ClassGaussianMixture(0, "pretrained", [0.5, 0.5], rng.normal(size=(2, 3)), np.ones((2, 3)))
    b = ClassGaussianMixture(1, "pretrained", [0.5, 0.5], rng.normal(size=(2, 3)), np.ones((2, 3)))
    c = component_costs(a, b)
    # vertices are the two permutation plans scaled by 1/2
    expected = np.sqrt(min(0.5 * (c[0, 0] + c[1, 1]), 0.5 * (c[0, 1] + c[1, 0])))
    assert mixture_w2(a, b) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_mixture_w2_k2_bruteforce(seed):
    rng = np.random.default_rng(100 + seed)
    a, b = random_gmm(rng, 2, 3), random_gmm(rng, 2, 3)
    expected = np.sqrt(two_by_two_oracle(a.weights, b.weights, component_costs(a, b)))
    assert abs(mixture_w2(a, b) - expected) <= 1e-9


def test_mixture_w2_errors():
    rng = np.random.default_rng(4)
    with pytest.raises(DimensionMismatch):
        mixture_w2(random_gmm(rng, 1, 2), random_gmm(rng, 1, 3))
    with pytest.raises(SpaceMismatch):
        mixture_w2(random_gmm(rng, 1, 2), random_gmm(rng, 1, 2, space="adapted"))


def empirical_w2(gmm_a, gmm_b, n, seed):
    x = sample_pseudo_features(gmm_a, n, seed).features
    y = sample_pseudo_features(gmm_b, n, seed + 1).features
    cost = ((x[:, None, :] - y[None, :, :]) ** 2).sum(-1)
    r, c = linear_sum_assignment(cost)
    return np.sqrt(cost[r, c].mean())


@pytest.mark.parametrize("seed", range(5))
def test_mixture_w2_vs_sampling_oracle(seed):
    rng = np.random.default_rng(200 + seed)
    a = ClassGaussianMixture(0, "pretrained", [1.0], rng.normal(0, 3, size=(1, 2)),
                             rng.uniform(0.3, 2.0, size=(1, 2)))
    b = ClassGaussianMixture(1, "pretrained", [1.0], rng.normal(0, 3, size=(1, 2)),
                             rng.uniform(0.3, 2.0, size=(1, 2)))
    exact = mixture_w2(a, b)
    assert abs(empirical_w2(a, b, 512, seed) - exact) <= 0.05 * exact


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_metric_sanity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_gmm(rng, 1, 3, class_id=i) for i in range(3))
    ab, bc, ac = mixture_w2(a, b), mixture_w2(b, c), mixture_w2(a, c)
    assert ab == pytest.approx(mixture_w2(b, a), abs=1e-12)
    assert ac <= ab + bc + 1e-12
    k2 = random_gmm(rng, 2, 3)
    assert mixture_w2(k2, k2) == 0.0
    assert mixture_w2(k2, a) > 0


# --- matrices -------------------------------------------------------------

def test_expand_empty_with_one_class():
    g = random_gmm(np.random.default_rng(0), 1, 2, class_id=0)
    R = expand_matrix(RelationMatrices(), [g])
    np.testing.assert_array_equal(R.M, [[0.0]])
    np.testing.assert_array_equal(R.gamma, [[1.0]])


def test_expand_twice_equals_once():
    rng = np.random.default_rng(5)
    gmms = [random_gmm(rng, 2, 3, class_id=i) for i in range(5)]
    once = expand_matrix(RelationMatrices(), gmms)
    twice = expand_matrix(expand_matrix(RelationMatrices(), gmms[:2]), gmms[2:])
    np.testing.assert_array_equal(once.M, twice.M)
    assert once.class_ids == twice.class_ids == (0, 1, 2, 3, 4)


def test_expand_keeps_existing_entries_and_matches_pairwise():
    rng = np.random.default_rng(6)
    gmms = [random_gmm(rng, 2, 3, class_id=i) for i in range(3)]
    R1 = expand_matrix(RelationMatrices(), gmms[:2])
    R2 = expand_matrix(R1, gmms[2:])
    np.testing.assert_array_equal(R2.M[:2, :2], R1.M)
    for i, j in itertools.combinations(range(3), 2):
        assert R2.M[i, j] == R2.M[j, i] == mixture_w2(gmms[i], gmms[j])
    assert np.all(np.diag(R2.M) == 0)
    assert R2.delta == np.median([R2.M[0, 1], R2.M[0, 2], R2.M[1, 2]])


def test_expand_rejects_duplicates():
    g = random_gmm(np.random.default_rng(0), 1, 2, class_id=3)
    R = expand_matrix(RelationMatrices(), [g])
    with pytest.raises(DuplicateClassInMatrix):
        expand_matrix(R, [g])


def test_weight_matrix_values():
    assert weight_matrix([[0.0]], 2.0)[0, 0] == 1.0
    assert weight_matrix([[1.5]], 1.5)[0, 0] == pytest.approx(np.exp(-1), rel=1e-15)
    assert round(float(weight_matrix([[2.0]], 2.0)[0, 0]), 4) == 0.3679
    with pytest.raises(NonpositiveTemperature):
        weight_matrix([[1.0]], 0.0)


def test_weight_matrix_monotone():
    rng = np.random.default_rng(7)
    m = np.sort(rng.uniform(0, 10, size=200))
    g = weight_matrix(m, 1.7)
    assert np.all(np.diff(g) < 0)


def test_gamma_permutation_covariance():
    rng = np.random.default_rng(8)
    gmms = [random_gmm(rng, 1, 3, class_id=i) for i in range(6)]
    perm = rng.permutation(6)
    R = expand_matrix(RelationMatrices(), gmms)
    Rp = expand_matrix(RelationMatrices(), [gmms[i] for i in perm])
    P = np.eye(6)[perm]
    np.testing.assert_allclose(Rp.gamma, P @ R.gamma @ P.T, atol=1e-15)
    np.testing.assert_array_equal(R.gamma_for(perm), Rp.gamma)


def test_delta_override_and_median():
    assert median_temperature(np.zeros((1, 1))) == 1.0
    assert median_temperature(np.zeros((3, 3))) == 1.0
    rng = np.random.default_rng(9)
    R = expand_matrix(RelationMatrices(delta_override=0.5), [random_gmm(rng, 1, 2, i) for i in range(3)])
    assert R.delta == 0.5
    np.testing.assert_array_equal(R.gamma, np.exp(-R.M / 0.5))
    assert R.with_delta(None).delta == median_temperature(R.M)


def test_relation_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    gmms = [random_gmm(rng, 2, 3, class_id=i) for i in range(4)]
    R = expand_matrix(RelationMatrices(), gmms)
    save_relation(R, tmp_path / "relation" / "task_1.json")
    back = load_relation(tmp_path / "relation" / "task_1.json", gmms)
    np.testing.assert_array_equal(back.M, R.M)
    assert back.delta == R.delta
    R2 = expand_matrix(back, [random_gmm(rng, 2, 3, class_id=9)])
    assert R2.size == 5


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31 - 1), st.floats(0.01, 100))
def test_gamma_contract_random_matrices(m, seed, delta):
    rng = np.random.default_rng(seed)
    A = rng.uniform(0, 5, size=(m, m))
    M = (A + A.T) / 2
    np.fill_diagonal(M, 0.0)
    G = weight_matrix(M, delta)
    np.testing.assert_array_equal(G, G.T)
    np.testing.assert_array_equal(np.diag(G), 1.0)
    assert np.all((G > 0) & (G <= 1))
    order = np.argsort(M, axis=None)
    ms, gs = M.ravel()[order], G.ravel()[order]
    strictly = np.diff(ms) > 0
    assert np.all(np.diff(gs)[strictly] < 0)
