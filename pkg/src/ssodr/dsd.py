"""Dense subgraph discovery over per-frame proposal overlap graphs.

Candidate regions are the positive-frame members of the best-scoring
clusters. Within each frame the candidates are linked when their boxes
overlap; the densest subgraph (by average degree) is kept as positives and
the rest of the frame's candidates become hard negatives.
"""

from __future__ import annotations

import json
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ssodr.core import Dataset, iou_matrix
from ssodr.errors import FormatError, InvalidInputError, MiningError
from ssodr.scoring import ClusterScorecard
from ssodr.wdec import ClusterState


@dataclass(frozen=True, eq=False)
class OverlapGraph:
    frame_id: str
    nodes: tuple[int, ...]  # region ids
    adjacency: np.ndarray  # (n, n) bool, symmetric, zero diagonal

    @property
    def n_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def edges(self) -> list[tuple[int, int]]:
        i, j = np.nonzero(np.triu(self.adjacency, 1))
        return [(self.nodes[a], self.nodes[b]) for a, b in zip(i, j)]

    def density(self, subset: Sequence[int] | None = None) -> float:
        """Average degree 2|E|/|V| of the induced subgraph (0 for the empty set)."""
        if subset is None:
            idx = np.arange(len(self.nodes))
        else:
            pos = {r: i for i, r in enumerate(self.nodes)}
            idx = np.array([pos[r] for r in subset], dtype=np.int64)
        if len(idx) == 0:
            return 0.0
        return float(self.adjacency[np.ix_(idx, idx)].sum()) / len(idx)


@dataclass
class MinedSet:
    positives: list[tuple[int, int]] = field(default_factory=list)  # (region_id, cluster_id)
    hard_negatives: list[int] = field(default_factory=list)

    @property
    def positive_ids(self) -> list[int]:
        return [r for r, _ in self.positives]

    def by_cluster(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for r, k in self.positives:
            out.setdefault(k, []).append(r)
        return out

    def __eq__(self, other):
        if not isinstance(other, MinedSet):
            return NotImplemented
        return list(map(tuple, self.positives)) == list(map(tuple, other.positives)) and list(
            self.hard_negatives
        ) == list(other.hard_negatives)

    def save(self, path: str | Path, config_digest: str = "") -> None:
        rec = {
            "format": "ssodr-mined",
            "version": 1,
            "config_digest": config_digest,
            "positives": [[int(r), int(k)] for r, k in self.positives],
            "hard_negatives": [int(r) for r in self.hard_negatives],
        }
        Path(path).write_text(json.dumps(rec, separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> MinedSet:
        try:
            rec = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise FormatError(f"cannot read mined set {path}: {exc}") from exc
        if rec.get("format") != "ssodr-mined":
            raise FormatError(f"{path}: not an ssodr-mined file")
        return cls([(r, k) for r, k in rec["positives"]], list(rec["hard_negatives"]))


def build_overlap_graph(
    region_ids: Sequence[int],
    boxes: np.ndarray,
    frame_ids: Sequence[str],
    iou_threshold: float = 0.4,
) -> OverlapGraph:
    """Link every pair of same-frame regions whose IoU reaches the threshold."""
    if not 0.0 < iou_threshold < 1.0:
        raise InvalidInputError(f"iou_threshold must be in (0, 1), got {iou_threshold}")
    frames = set(frame_ids)
    if len(frames) > 1:
        raise InvalidInputError(f"overlap graph needs regions from one frame, got {sorted(frames)}")
    if len(region_ids) != len(frame_ids) or len(region_ids) != len(boxes):
        raise InvalidInputError("region_ids, boxes and frame_ids must align")
    adj = iou_matrix(boxes, boxes) >= iou_threshold
    np.fill_diagonal(adj, False)
    frame_id = next(iter(frames)) if frames else ""
    return OverlapGraph(frame_id, tuple(int(r) for r in region_ids), adj)


def densest_subgraph(graph: OverlapGraph) -> list[int]:
    """Greedy peeling for the maximum average-degree subgraph.

    Repeatedly removes a minimum-degree node (smallest region id on ties) and
    returns the best intermediate node set. On equal density the smaller,
    later set wins, so an edgeless graph yields a single node.
    """
    n = len(graph.nodes)
    if n == 0:
        return []
    ids = np.array(graph.nodes)
    alive = np.ones(n, dtype=bool)
    degree = graph.adjacency.sum(axis=1).astype(np.int64)
    edges = int(degree.sum()) // 2
    best_density, best_alive = 2.0 * edges / n, alive.copy()
    big = np.iinfo(np.int64).max
    for size in range(n - 1, 0, -1):
        # lexsort key order: last key is primary
        cand = np.lexsort((ids, np.where(alive, degree, big)))[0]
        alive[cand] = False
        edges -= int(degree[cand])
        degree -= graph.adjacency[cand] & alive
        degree[cand] = 0
        density = 2.0 * edges / size
        if density >= best_density:
            best_density, best_alive = density, alive.copy()
    return [graph.nodes[i] for i in np.flatnonzero(best_alive)]


def candidate_clusters(scorecard: ClusterScorecard, top_m: int) -> list[int]:
    """The ``top_m`` highest-scoring clusters, skipping masked ones."""
    if top_m < 1:
        raise InvalidInputError("top_m must be >= 1")
    return [int(k) for k in scorecard.ranking() if not scorecard.masked[k]][:top_m]


def mine_regions(
    dataset: Dataset,
    state: ClusterState,
    scorecard: ClusterScorecard,
    edge_iou: float = 0.4,
    top_m: int = 3,
) -> MinedSet:
    if len(state.assignments) != dataset.n_regions:
        raise InvalidInputError("cluster assignments do not match the dataset")
    keep = np.isin(state.assignments, candidate_clusters(scorecard, top_m))
    mined = MinedSet()
    n_candidates = 0
    for fi, rows in enumerate(dataset.rows_by_frame()):
        frame = dataset.frames[fi]
        if frame.frame_label != 1:
            continue
        rows = rows[keep[rows]]
        n_candidates += len(rows)
        if len(rows) == 0:
            continue
        rids = dataset.region_ids[rows]
        if len(rows) < 2:
            survivors = set(int(r) for r in rids)
        else:
            graph = build_overlap_graph(rids, dataset.boxes[rows], [frame.frame_id] * len(rows), edge_iou)
            survivors = set(densest_subgraph(graph))
        for row, rid in zip(rows, rids):
            rid = int(rid)
            if rid in survivors:
                mined.positives.append((rid, int(state.assignments[row])))
            else:
                mined.hard_negatives.append(rid)
    if n_candidates == 0:
        raise MiningError("no candidate regions in positive frames of the top clusters")
    return mined
