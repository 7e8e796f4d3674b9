import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdat import diffcore as dc
from mdat import dn4


def pool_of(arr):
    return dn4.SupportPool(dc.constant(np.asarray(arr, dtype=float)))


def brute_force_scores(query, pools, k):
    qn = query / np.linalg.norm(query, axis=1, keepdims=True)
    out = []
    for pool in pools:
        pn = pool / np.linalg.norm(pool, axis=1, keepdims=True)
        sims = qn @ pn.T
        out.append(np.sort(sims, axis=1)[:, ::-1][:, :k].sum())
    return np.array(out)


def test_identical_and_orthogonal_descriptors():
    scores = dn4.class_scores(np.array([[1.0, 0.0]]), pool_of([[[1.0, 0.0]], [[0.0, 1.0]]]), k_nn=1)
    np.testing.assert_allclose(scores.data, [1.0, 0.0], atol=1e-15)


def test_k1_is_the_best_cosine():
    rng = np.random.default_rng(0)
    q, pools = rng.standard_normal((5, 4)), rng.standard_normal((2, 7, 4))
    np.testing.assert_allclose(dn4.class_scores(q, pool_of(pools), 1).data, brute_force_scores(q, pools, 1),
                               atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 5), st.integers(1, 16), st.integers(1, 32), st.integers(2, 8), st.integers(1, 5),
       st.integers(0, 10**6))
def test_scores_match_pairwise_oracle(c, m, p, d, k, seed):
    k = min(k, p)
    rng = np.random.default_rng(seed)
    q, pools = rng.standard_normal((m, d)), rng.standard_normal((c, p, d))
    np.testing.assert_allclose(dn4.class_scores(q, pool_of(pools), k).data, brute_force_scores(q, pools, k),
                               atol=1e-10, rtol=0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10**6), st.floats(0.1, 10.0))
def test_query_scale_invariance(seed, factor):
    rng = np.random.default_rng(seed)
    q, pools = rng.standard_normal((6, 3)), pool_of(rng.standard_normal((3, 5, 3)))
    np.testing.assert_allclose(dn4.class_scores(q * factor, pools, 2).data, dn4.class_scores(q, pools, 2).data,
                               atol=1e-12)


def test_permuting_classes_permutes_scores():
    rng = np.random.default_rng(1)
    q, pools = rng.standard_normal((2, 6, 4)), rng.standard_normal((4, 9, 4))
    perm = np.array([2, 0, 3, 1])
    a = dn4.class_scores(q, pool_of(pools), 3).data
    b = dn4.class_scores(q, pool_of(pools[perm]), 3).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_ties_pick_the_lowest_pool_index():
    vals, idx = dn4._topk_inplace(np.array([[0.5, 0.9, 0.9, 0.1]]), 2)
    assert idx.tolist() == [[1, 2]]


def test_support_pool_from_class_major_support():
    desc = np.arange(2 * 3 * 2 * 4, dtype=float).reshape(6, 2, 4)  # 2 classes x 3 shots, m=2
    pool = dn4.SupportPool.from_support(desc, 2)
    assert pool.descriptors.shape == (2, 6, 4)
    np.testing.assert_array_equal(pool.descriptors.data[1, 0], desc[3, 0])


def test_bad_pools_and_k_are_rejected():
    with pytest.raises(ValueError):
        dn4.SupportPool.from_classes([np.ones((2, 3)), np.ones((0, 3))])
    with pytest.raises(ValueError):
        dn4.class_scores(np.ones((2, 3)), pool_of(np.ones((2, 2, 3))), k_nn=3)
    with pytest.raises(ValueError):
        dn4.class_scores(np.ones((2, 4)), pool_of(np.ones((2, 2, 3))), k_nn=1)
    with pytest.raises(ValueError):
        dn4.SupportPool.from_support(np.ones((5, 2, 3)), 2)


def test_predict_softmax_values():
    p = dn4.predict(np.array([10.0, 0.0])).probabilities.data
    assert abs(p[0] - 0.9999546) < 1e-6
    np.testing.assert_allclose(dn4.predict(np.zeros(4)).probabilities.data, 0.25)
    with pytest.raises(ValueError):
        dn4.predict(np.zeros(2), tau=0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8), st.floats(0.05, 20))
def test_prediction_invariants(scores, tau):
    scores = np.array(scores)
    pred = dn4.predict(scores, tau)
    p = pred.probabilities.data
    assert np.all(p >= 0) and abs(p.sum() - 1) < 1e-9
    if np.sum(scores == scores.max()) == 1:
        assert p.argmax() == scores.argmax()


def test_cross_entropy_values():
    uniform = dn4.ClassPrediction(dc.constant(np.zeros(5)), None)
    assert abs(dn4.cross_entropy(uniform, 0).item() - math.log(5)) < 1e-12
    logits = np.log(np.array([0.7, 0.2, 0.1]))
    assert abs(dn4.cross_entropy(dn4.predict(logits), 0).item() - 0.35667494393873245) < 1e-12
    certain = dn4.predict(np.array([1000.0, 0.0]))
    assert dn4.cross_entropy(certain, 0).item() == 0.0


def test_cross_entropy_is_floored():
    wrong = dn4.predict(np.array([1000.0, 0.0]))
    assert abs(dn4.cross_entropy(wrong, 1).item() - (-math.log(1e-12))) < 1e-9


def test_head_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    pools = rng.standard_normal((3, 8, 4))
    y = np.array([0, 2])

    def loss(q, p):
        return dn4.cross_entropy(dn4.predict(dn4.class_scores(q, dn4.SupportPool(p), 3), 2.0), y)

    inputs = {"q": rng.standard_normal((2, 5, 4)), "p": pools}
    assert dc.finite_difference_check(dc.Graph(loss), inputs, "q") < 1e-4
    assert dc.finite_difference_check(dc.Graph(loss), inputs, "p") < 1e-4
