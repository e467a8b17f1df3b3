from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssodr.core import Box, Dataset, FrameRecord, RegionRecord
from ssodr.errors import ScoringError
from ssodr.scoring import ClusterScorecard, ClusterStats, cluster_stats, potential_score, score_clusters
from ssodr.wdec import ClusterState


def stats(P, V, U, count=None):
    n = len(P)
    return ClusterStats(
        positive_ratio=np.asarray(P, float),
        variance=np.asarray(V, float),
        n_videos=np.asarray(U, np.int64),
        count=np.asarray(count if count is not None else [10] * n, np.int64),
    )


def score_oracle(P, V, U, tau):
    raw = [p * p * math.log(u) / max(v, 1e-8) for p, v, u in zip(P, V, U)]
    total = sum(raw)
    norm = [r / total for r in raw]
    e = [math.exp(tau * x) for x in norm]
    return [v / sum(e) for v in e]


def test_fixture_matches_scalar_oracle():
    card = potential_score(stats([0.9, 0.3], [0.1, 0.1], [5, 5]), tau=50)
    np.testing.assert_allclose(card.score, score_oracle([0.9, 0.3], [0.1, 0.1], [5, 5], 50), rtol=1e-6)
    assert card.top() == 0


def test_random_fixtures_match_oracle():
    rng = np.random.default_rng(0)
    for _ in range(50):
        K = int(rng.integers(2, 6))
        P, V, U = rng.uniform(0.05, 1, K), rng.uniform(0.01, 2, K), rng.integers(2, 20, K)
        tau = float(rng.uniform(0.5, 60))
        card = potential_score(stats(P, V, U), tau)
        np.testing.assert_allclose(card.score, score_oracle(P, V, U, tau), rtol=1e-6)


def test_singleton():
    assert potential_score(stats([0.5], [0.2], [3]), tau=50).score.tolist() == [1.0]


def test_symmetric_clusters_split():
    np.testing.assert_allclose(potential_score(stats([0.7, 0.7], [0.3, 0.3], [4, 4]), 50).score, [0.5, 0.5])


def test_single_video_cluster_scores_lowest_but_unmasked():
    card = potential_score(stats([1.0, 0.5], [0.1, 0.5], [1, 4]), tau=50)
    assert not card.masked.any()
    assert card.raw[0] == 0.0
    assert card.top() == 1


def test_empty_and_degenerate_clusters_are_masked():
    card = potential_score(stats([0.9, 0.0, 1.0, 0.4], [0.2, 0.0, 0.0, 0.3], [5, 0, 3, 6], [8, 0, 4, 9]), 50)
    assert card.masked.tolist() == [False, True, True, False]
    assert card.score[1] == 0.0 and card.score[2] == 0.0
    assert card.score.sum() == pytest.approx(1.0, abs=1e-12)


def test_all_masked_raises():
    with pytest.raises(ScoringError):
        potential_score(stats([0.0, 0.0], [0.0, 0.0], [0, 0], [0, 0]), 50)


def test_all_raw_zero_gives_uniform():
    card = potential_score(stats([0.0, 0.0, 0.0], [0.1, 0.2, 0.3], [3, 3, 3]), 50)
    np.testing.assert_allclose(card.score, [1 / 3] * 3)


K_STATS = st.integers(2, 6).flatmap(
    lambda k: st.tuples(
        st.lists(st.floats(0.01, 1.0), min_size=k, max_size=k),
        st.lists(st.floats(0.01, 5.0), min_size=k, max_size=k),
        st.lists(st.integers(1, 30), min_size=k, max_size=k),
    )
)


@given(K_STATS, st.floats(0.1, 100))
def test_scores_sum_to_one(s, tau):
    P, V, U = s
    if not any(u > 1 for u in U):
        U = [2] + U[1:]
    assert potential_score(stats(P, V, U), tau).score.sum() == pytest.approx(1.0, abs=1e-6)


def _rank(card, k):
    return int(np.flatnonzero(card.ranking() == k)[0])


@given(K_STATS, st.data())
def test_monotone_in_each_factor(s, data):
    P, V, U = (list(x) for x in s)
    k = data.draw(st.integers(0, len(P) - 1))
    base = _rank(potential_score(stats(P, V, U), 50), k)
    P2 = P.copy()
    P2[k] = min(1.0, P[k] * data.draw(st.floats(1.0, 3.0)))
    U2 = U.copy()
    U2[k] = U[k] + data.draw(st.integers(0, 10))
    V2 = V.copy()
    V2[k] = V[k] * data.draw(st.floats(0.1, 1.0))
    for variant in (stats(P2, V, U), stats(P, V, U2), stats(P, V2, U)):
        assert _rank(potential_score(variant, 50), k) <= base


def test_small_temperature_tends_to_uniform():
    card = potential_score(stats([0.9, 0.3, 0.6], [0.1, 0.4, 0.2], [5, 3, 8]), tau=1e-9)
    np.testing.assert_allclose(card.score, [1 / 3] * 3, atol=1e-6)


def test_larger_temperature_increases_max():
    st_ = stats([0.9, 0.3, 0.6], [0.1, 0.4, 0.2], [5, 3, 8])
    maxima = [potential_score(st_, tau).score.max() for tau in (0.5, 1, 5, 10, 20)]
    assert all(b > a for a, b in zip(maxima, maxima[1:]))


@given(K_STATS, st.randoms())
def test_permutation_equivariance(s, rnd):
    P, V, U = s
    perm = list(range(len(P)))
    rnd.shuffle(perm)
    a = potential_score(stats(P, V, U), 50).score
    b = potential_score(stats([P[i] for i in perm], [V[i] for i in perm], [U[i] for i in perm]), 50).score
    np.testing.assert_allclose(b, a[perm], rtol=1e-12, atol=1e-300)


# stats from data ------------------------------------------------------------


def _dataset(embeddings, frame_of_region, frames):
    regions = [
        RegionRecord(i, frames[f].frame_id, Box(0, 0, 1, 1), np.asarray(z, np.float32), frames[f].frame_label)
        for i, (z, f) in enumerate(zip(embeddings, frame_of_region))
    ]
    return Dataset.from_records("x", len(embeddings[0]), frames, regions)


def test_concentrated_cluster_stats():
    frames = [FrameRecord("p", "v0", 1), FrameRecord("n", "v1", 0)]
    emb = [[1.0, 1.0]] * 4 + [[-3.0, 0.0], [-3.5, 0.5]]
    ds = _dataset(emb, [0, 0, 0, 0, 1, 1], frames)
    state = ClusterState(np.array([[1.0, 1.0], [-3.25, 0.25]]), np.array([0, 0, 0, 0, 1, 1]))
    s = cluster_stats(ds, state)
    assert (s.positive_ratio[0], s.variance[0], s.n_videos[0], s.count[0]) == (1.0, 0.0, 1, 4)
    # all members at the centroid: masked rather than divided by zero
    card = score_clusters(ds, state, 50)
    assert card.masked.tolist() == [True, False]


def test_half_positive_cluster():
    frames = [FrameRecord("p", "v0", 1), FrameRecord("n", "v1", 0)]
    ds = _dataset([[0, 0], [1, 0], [0, 1], [1, 1]], [0, 0, 1, 1], frames)
    s = cluster_stats(ds, ClusterState(np.array([[0.5, 0.5], [9, 9]]), np.zeros(4, np.int64)))
    assert s.positive_ratio[0] == 0.5 and s.n_videos[0] == 2 and s.count[1] == 0


def test_variance_matches_two_pass_oracle():
    rng = np.random.default_rng(5)
    frames = [FrameRecord(f"f{i}", f"v{i}", i % 2) for i in range(6)]
    emb = (rng.standard_normal((30, 5)) * 3 + 7).tolist()
    ds = _dataset(emb, [i % 6 for i in range(30)], frames)
    mu = rng.standard_normal((2, 5)) + 7
    state = ClusterState(mu, np.zeros(30, np.int64))
    # two passes in plain python over float32-rounded inputs
    zs = [[float(np.float32(v)) for v in row] for row in emb]
    m = [float(np.float32(v)) for v in mu[0]]
    diffs = [[a - b for a, b in zip(z, m)] for z in zs]
    V = sum(sum(d * d for d in row) for row in diffs) / len(zs)
    assert cluster_stats(ds, state).variance[0] == pytest.approx(V, rel=1e-6)


def test_scorecard_round_trip(tmp_path):
    card = potential_score(stats([0.9, 0.3, 0.0], [0.1, 0.4, 0.0], [5, 3, 0], [3, 4, 0]), 50)
    card.save(tmp_path / "s.jsonl", "d")
    back = ClusterScorecard.load(tmp_path / "s.jsonl")
    assert back.records() == card.records()
    assert back.tau == 50
