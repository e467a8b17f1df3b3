from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ssodr import dsd, scoring, wdec
from ssodr.core import Box, Dataset, FrameRecord, RegionRecord, iou
from ssodr.dsd import MinedSet, OverlapGraph, build_overlap_graph, densest_subgraph, mine_regions
from ssodr.errors import InvalidInputError, MiningError
from ssodr.scoring import ClusterStats, potential_score
from ssodr.wdec import ClusterState


def graph_from_edges(n, edges, ids=None):
    adj = np.zeros((n, n), bool)
    for a, b in edges:
        adj[a, b] = adj[b, a] = True
    return OverlapGraph("f", tuple(ids if ids is not None else range(n)), adj)


def brute_force_density(adj: np.ndarray) -> float:
    """Maximum 2|E|/|V| over every non-empty node subset."""
    n = len(adj)
    best = 0.0
    for mask in range(1, 1 << n):
        idx = [i for i in range(n) if mask >> i & 1]
        best = max(best, adj[np.ix_(idx, idx)].sum() / len(idx))
    return best


def random_graph(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 13))
    p = rng.uniform(0.1, 0.9)
    upper = np.triu(rng.random((n, n)) < p, 1)
    return graph_from_edges(n, list(zip(*np.nonzero(upper))))


# graph construction -------------------------------------------------------------


def test_disjoint_boxes_no_edge():
    g = build_overlap_graph([1, 2], np.array([[0, 0, 10, 10], [50, 50, 60, 60]]), ["f", "f"])
    assert g.n_edges == 0


def test_identical_boxes_one_edge():
    g = build_overlap_graph([1, 2], np.array([[0, 0, 10, 10], [0, 0, 10, 10]]), ["f", "f"])
    assert g.edges() == [(1, 2)]


def test_jittered_clique_plus_far_box():
    base = np.array([100.0, 100.0, 200.0, 200.0])
    rng = np.random.default_rng(0)
    boxes = [base + rng.uniform(-5, 5, 4) for _ in range(5)] + [np.array([400.0, 300, 450, 350])]
    boxes = np.array(boxes)
    # oracle: pairwise iou over the jittered copies
    assert min(iou(boxes[i], boxes[j]) for i, j in itertools.combinations(range(5), 2)) >= 0.6
    g = build_overlap_graph(list(range(6)), boxes, ["f"] * 6, 0.4)
    assert sorted(g.edges()) == list(itertools.combinations(range(5), 2))


def test_graph_rejects_mixed_frames_and_bad_threshold():
    with pytest.raises(InvalidInputError):
        build_overlap_graph([1, 2], np.zeros((2, 4)) + [0, 0, 1, 1], ["a", "b"])
    with pytest.raises(InvalidInputError):
        build_overlap_graph([1], np.array([[0, 0, 1, 1]]), ["a"], iou_threshold=1.0)


# densest subgraph ---------------------------------------------------------------


def test_single_node():
    assert densest_subgraph(graph_from_edges(1, [], ids=[42])) == [42]


def test_triangle():
    g = graph_from_edges(3, [(0, 1), (1, 2), (0, 2)])
    assert sorted(densest_subgraph(g)) == [0, 1, 2]
    assert g.density(densest_subgraph(g)) == 2.0 == brute_force_density(g.adjacency)


def test_path_keeps_all_three():
    g = graph_from_edges(3, [(0, 1), (1, 2)])
    assert sorted(densest_subgraph(g)) == [0, 1, 2]
    assert g.density([0, 1, 2]) == pytest.approx(4 / 3) == brute_force_density(g.adjacency)


def test_edgeless_graph_keeps_one_node():
    assert len(densest_subgraph(graph_from_edges(4, []))) == 1


def test_peeling_matches_brute_force_on_random_graphs():
    exact, worst = 0, 1.0
    for seed in range(100):
        g = random_graph(seed)
        opt = brute_force_density(g.adjacency)
        got = g.density(densest_subgraph(g))
        exact += got == pytest.approx(opt)
        if opt > 0:
            worst = min(worst, got / opt)
    assert exact >= 95
    assert worst >= 0.5


@given(st.integers(0, 10_000))
def test_result_at_least_full_graph_and_any_edge(seed):
    g = random_graph(seed)
    d = g.density(densest_subgraph(g))
    assert d >= g.density() - 1e-12
    if g.n_edges:
        assert d >= 1.0


# mining ----------------------------------------------------------------------------


def _mining_fixture():
    """Frames: 'solo' (1 candidate), 'clique' (3 overlapping + 1 isolated), 'neg' (negative)."""
    frames = [FrameRecord("solo", "v0", 1), FrameRecord("clique", "v1", 1), FrameRecord("neg", "v2", 0)]
    b = Box(10, 10, 50, 50)
    specs = [
        (0, "solo", b),
        (1, "clique", b),
        (2, "clique", b.shifted(1, 1)),
        (3, "clique", b.shifted(-1, 2)),
        (4, "clique", Box(200, 200, 240, 240)),
        (5, "neg", b),
        (6, "neg", b.shifted(1, 0)),
    ]
    z = np.zeros(2, np.float32)
    regions = [RegionRecord(i, f, box, z + i, next(fr.frame_label for fr in frames if fr.frame_id == f)) for i, f, box in specs]
    ds = Dataset.from_records("x", 2, frames, regions)
    state = ClusterState(np.array([[0.0, 0.0], [9.0, 9.0]]), np.zeros(7, np.int64))
    card = potential_score(
        ClusterStats(np.array([0.7, 0.0]), np.array([1.0, 0.0]), np.array([3, 0]), np.array([7, 0])), 50
    )
    return ds, state, card


def test_mining_small_frame_and_clique_rules():
    ds, state, card = _mining_fixture()
    mined = mine_regions(ds, state, card)
    assert mined.positive_ids == [0, 1, 2, 3]
    assert mined.hard_negatives == [4]
    assert all(k == 0 for _, k in mined.positives)


def test_mining_is_reproducible_and_disjoint():
    ds, state, card = _mining_fixture()
    a, b = mine_regions(ds, state, card), mine_regions(ds, state, card)
    assert a == b
    assert not set(a.positive_ids) & set(a.hard_negatives)


def test_mining_without_candidates_raises():
    ds, state, card = _mining_fixture()
    state = ClusterState(state.centroids, np.ones(7, np.int64))  # everything in the masked cluster
    with pytest.raises(MiningError):
        mine_regions(ds, state, card)


def test_candidate_clusters_skip_masked():
    card = potential_score(
        ClusterStats(np.array([0.9, 0.0, 0.5, 0.2]), np.array([0.1, 0.0, 0.2, 0.3]), np.array([5, 0, 5, 5]), np.array([9, 0, 9, 9])),
        50,
    )
    assert dsd.candidate_clusters(card, 3) == [0, 2, 3]


def test_mined_set_round_trip(tmp_path):
    m = MinedSet([(3, 1), (9, 0)], [4, 7])
    m.save(tmp_path / "m.json")
    assert MinedSet.load(tmp_path / "m.json") == m


def test_mined_positives_mostly_planted(default_synth):
    ds, _, plant = default_synth
    state = wdec.initial_state(ds.embeddings, 10, seed=0)
    state = wdec.refine(state, ds.embeddings, ds.weak_labels, 5, step_size=1e-3)
    card = scoring.score_clusters(ds, state, 50)
    mined = mine_regions(ds, state, card)
    planted = set(plant.object_region_ids)
    purity = np.mean([r in planted for r in mined.positive_ids])
    assert purity >= 0.80
    rows = [ds.region_index[r] for r in mined.positive_ids]
    assert np.all(ds.weak_labels[rows] == 1)
