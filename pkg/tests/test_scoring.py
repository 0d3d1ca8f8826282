import numpy as np
import pytest

from conftest import make_sample, unit
from instill.core import ValidationError
from instill.scoring import (
    NeighborHistogram,
    QualityRewardParams,
    ReferenceIndex,
    build_index,
    expected_score,
    neighbor_histogram,
    posterior,
    quality_reward,
    score_query,
    self_knn,
)
from instill.stm import ScoreTransitionModel


def brute_force_posterior(h: np.ndarray, T: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Direct product-domain Bayes rule; the oracle for the log-domain path."""
    weights = np.array([p[i] * np.prod(T[i] ** h) for i in range(len(p))])
    return weights / weights.sum()


def _index_from(vectors, labels):
    samples = [
        make_sample(i, rating=int(label), embedding=np.asarray(vec, dtype=np.float64))
        for i, (vec, label) in enumerate(zip(vectors, labels))
    ]
    return build_index(samples)


def test_build_index_self_retrieval():
    index = _index_from(np.eye(3), [1, 2, 3])
    rows, dists = index.query(np.eye(3)[0], k=1)
    assert rows.tolist() == [0]
    assert dists[0] == pytest.approx(0.0, abs=1e-12)


def test_query_tie_breaks_by_lower_row():
    # rows 1 and 2 are identical, so any query ties between them
    vectors = np.stack([np.eye(4)[0], np.eye(4)[1], np.eye(4)[1], np.eye(4)[2]])
    index = _index_from(vectors, [1, 2, 3, 4])
    rows, _ = index.query(np.eye(4)[1], k=2)
    assert rows.tolist() == [1, 2]


def test_build_index_requires_labels():
    samples = [make_sample(0, rating=None, embedding=np.eye(3)[0])]
    with pytest.raises(ValidationError, match="missing rating"):
        build_index(samples)


def test_build_index_rejects_mixed_dims():
    samples = [
        make_sample(0, rating=1, embedding=np.eye(3)[0]),
        make_sample(1, rating=1, embedding=np.eye(4)[0]),
    ]
    with pytest.raises(ValidationError, match="dimension"):
        build_index(samples)


def test_index_save_load_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    vectors = unit(rng.normal(size=(20, 8)))
    index = _index_from(vectors, rng.integers(0, 6, size=20))
    path = tmp_path / "index.bin"
    index.save(path)
    loaded = ReferenceIndex.load(path)
    assert np.array_equal(loaded.embeddings, index.embeddings)
    assert np.array_equal(loaded.labels, index.labels)
    q = unit(rng.normal(size=8))
    assert np.array_equal(loaded.query(q, 5)[0], index.query(q, 5)[0])


def test_index_detects_corruption(tmp_path):
    index = _index_from(np.eye(3), [1, 2, 3])
    path = tmp_path / "index.bin"
    index.save(path)
    data = bytearray(path.read_bytes())
    data[40] ^= 0xFF
    path.write_bytes(bytes(data))
    with pytest.raises(ValidationError, match="hash"):
        ReferenceIndex.load(path)


def test_ivf_mode_recall_gate(tmp_path):
    rng = np.random.default_rng(2)
    vectors = unit(rng.normal(size=(3000, 16)))
    labels = rng.integers(0, 6, size=3000)
    samples = [
        make_sample(i, rating=int(l), embedding=vectors[i]) for i, l in enumerate(labels)
    ]
    index = build_index(samples, exact_max_points=1000)
    assert index.metadata["mode"] == "ivf"
    assert index.metadata["recall"] >= 0.95
    # measure recall@10 on fresh queries against exact search
    exact = ReferenceIndex(vectors, labels.astype(np.int8))
    queries = unit(rng.normal(size=(64, 16)))
    hits = 0
    for q in queries:
        approx_rows = set(index.query(q, 10)[0].tolist())
        exact_rows = set(exact.query(q, 10)[0].tolist())
        hits += len(approx_rows & exact_rows)
    assert hits / (64 * 10) >= 0.9
    path = tmp_path / "ivf.bin"
    index.save(path)
    loaded = ReferenceIndex.load(path)
    q = queries[0]
    assert np.array_equal(loaded.query(q, 10)[0], index.query(q, 10)[0])


def test_histogram_counting():
    index = _index_from(np.eye(3), [4, 4, 5])
    # query equidistant from all three: returns all, counts 2x4 + 1x5
    q = unit(np.ones(3))
    hist = neighbor_histogram(index, q, k=3)
    assert hist.h.tolist() == [0, 0, 0, 0, 2, 1]


def test_histogram_unanimity():
    index = _index_from(np.eye(4), [3, 3, 3, 3])
    hist = neighbor_histogram(index, unit(np.ones(4)), k=4)
    assert hist.h.tolist() == [0, 0, 0, 3 + 1, 0, 0]


def test_histogram_k_bounds():
    index = _index_from(np.eye(3), [1, 1, 1])
    with pytest.raises(ValidationError):
        neighbor_histogram(index, np.eye(3)[0], k=1)
    with pytest.raises(ValidationError):
        neighbor_histogram(index, np.eye(3)[0], k=4)


def test_histogram_inverse_distance_weighting():
    # neighbor at distance 0 labeled 4, neighbor at distance 1 labeled 5
    vectors = np.stack([np.eye(3)[0], np.eye(3)[1], -np.eye(3)[0]])
    index = _index_from(vectors, [4, 5, 1])
    hist = neighbor_histogram(index, np.eye(3)[0], k=2, weighting="inverse-distance")
    assert hist.weighted
    assert hist.h[4] > hist.h[5] > 0
    assert hist.h.sum() == pytest.approx(2.0, abs=1e-9)


def test_posterior_two_class_hand_case():
    model = ScoreTransitionModel(
        T=np.array([[0.9, 0.1], [0.2, 0.8]]), p=np.array([0.5, 0.5])
    )
    hist = NeighborHistogram(h=np.array([2.0, 0.0]), k=2, weighted=False)
    post = posterior(hist, model)
    # hand computation: 0.5 * 0.81 vs 0.5 * 0.04, normalized
    assert post[0] == pytest.approx(0.9529, abs=1e-4)
    assert post[1] == pytest.approx(0.0471, abs=1e-4)


def test_posterior_uniform_likelihood_returns_prior():
    p = np.array([0.1, 0.2, 0.3, 0.4])
    model = ScoreTransitionModel(T=np.full((4, 4), 0.25), p=p)
    hist = NeighborHistogram(h=np.array([1.0, 2.0, 0.0, 1.0]), k=4, weighted=False)
    assert np.allclose(posterior(hist, model), p, atol=1e-12)


def test_posterior_no_evidence_returns_prior():
    p = np.array([0.25, 0.25, 0.3, 0.2])
    model = ScoreTransitionModel(
        T=np.array(
            [[0.7, 0.1, 0.1, 0.1], [0.1, 0.7, 0.1, 0.1], [0.1, 0.1, 0.7, 0.1], [0.1, 0.1, 0.1, 0.7]]
        ),
        p=p,
    )
    hist = NeighborHistogram(h=np.zeros(4), k=0, weighted=False)
    assert np.allclose(posterior(hist, model), p, atol=1e-15)


def test_posterior_requires_smoothed_model():
    model = ScoreTransitionModel(T=np.eye(2), p=np.array([0.5, 0.5]))
    hist = NeighborHistogram(h=np.array([1.0, 0.0]), k=1, weighted=False)
    with pytest.raises(ValidationError, match="smoothed"):
        posterior(hist, model)


def test_posterior_matches_bruteforce_randomized(rng):
    for _ in range(25):
        C = int(rng.integers(2, 7))
        T = rng.random((C, C)) + 0.05
        T /= T.sum(axis=1, keepdims=True)
        p = rng.random(C) + 0.05
        p /= p.sum()
        model = ScoreTransitionModel(T=T, p=p)
        k = int(rng.integers(2, 8))
        h = np.bincount(rng.integers(0, C, size=k), minlength=C).astype(float)
        hist = NeighborHistogram(h=h, k=k, weighted=False)
        assert np.allclose(posterior(hist, model), brute_force_posterior(h, T, p), atol=1e-12)


def test_posterior_extreme_histogram_is_stable():
    model = ScoreTransitionModel(
        T=np.array([[0.99, 0.01], [0.01, 0.99]]), p=np.array([0.5, 0.5])
    )
    hist = NeighborHistogram(h=np.array([500.0, 0.0]), k=500, weighted=False)
    post = posterior(hist, model)
    assert np.isfinite(post).all()
    assert post.sum() == pytest.approx(1.0, abs=1e-12)
    assert post[0] > 0.999999


def test_expected_score_cases():
    one_hot = np.zeros(6)
    one_hot[4] = 1.0
    assert expected_score(one_hot) == 4.0
    assert expected_score(np.full(6, 1 / 6)) == pytest.approx(2.5)
    assert expected_score(np.array([0, 0, 0, 0.5, 0.5, 0])) == pytest.approx(3.5)


def test_expected_score_rejects_unnormalized():
    with pytest.raises(ValidationError):
        expected_score(np.array([0.5, 0.6]))


def test_quality_reward_branches():
    params = QualityRewardParams()
    assert quality_reward(4.2, params) == 1.0
    assert quality_reward(3.5, params) == 0.3
    assert quality_reward(2.0, params) == 0.0


def test_quality_reward_breakpoints():
    params = QualityRewardParams()
    assert quality_reward(4.0, params) == 1.0  # lambda inclusive
    assert quality_reward(3.0, params) == 0.3  # kappa inclusive
    assert quality_reward(np.nextafter(4.0, 0.0), params) == 0.3
    assert quality_reward(np.nextafter(3.0, 0.0), params) == 0.0
    # piecewise constant between breakpoints
    for s in np.linspace(0.0, 5.0, 101):
        expected = 1.0 if s >= 4 else 0.3 if s >= 3 else 0.0
        assert quality_reward(float(s), params) == expected


def test_quality_params_validation():
    with pytest.raises(ValidationError):
        QualityRewardParams(lambda_thresh=3.0, kappa_thresh=3.0)
    with pytest.raises(ValidationError):
        QualityRewardParams(beta_mid=2.0, alpha_high=1.0)


def test_score_query_chain():
    rng = np.random.default_rng(4)
    vectors = unit(rng.normal(size=(50, 8)))
    labels = np.full(50, 5)
    index = _index_from(vectors, labels)
    model = ScoreTransitionModel(
        T=np.full((6, 6), 0.02) + np.eye(6) * 0.88, p=np.full(6, 1 / 6)
    )
    post, s_hat, reward = score_query(index, model, vectors[0], k=5)
    assert s_hat > 4.5
    assert reward == 1.0
    assert post.argmax() == 5


def test_posterior_near_identity_matches_majority_vote(rng):
    # lightly smoothed identity T with uniform prior: the posterior argmax
    # must agree with the plain neighbor-majority label
    from instill.stm import smooth_stm

    model = smooth_stm(
        ScoreTransitionModel(T=np.eye(6), p=np.full(6, 1 / 6)), alpha=1e-4
    )
    checked = 0
    for _ in range(200):
        k = int(rng.integers(2, 9))
        labels = rng.integers(0, 6, size=k)
        h = np.bincount(labels, minlength=6).astype(float)
        if np.sum(h == h.max()) != 1:
            continue  # tied majorities fall to float summation order
        hist = NeighborHistogram(h=h, k=k, weighted=False)
        post = posterior(hist, model)
        assert int(post.argmax()) == int(h.argmax())
        checked += 1
    assert checked > 50


def test_self_knn_excludes_self_and_orders():
    vectors = np.stack([np.eye(3)[0], np.eye(3)[0], np.eye(3)[1]])
    nn = self_knn(vectors, 2)
    assert nn[0].tolist() == [1, 2]
    assert nn[1].tolist() == [0, 2]
